//! Regression losses, their gradients, and Monte-Carlo aggregation of
//! regressor samples into mean / aleatoric / epistemic maps.
//!
//! The slice functions work in f64 and are what the gradient checks exercise;
//! the volume wrappers validate shapes and widen from f32.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume3D;

/// `sum (y - yhat)^2` and its gradient with respect to `yhat`.
pub fn l2_loss_slice(y: &[f64], yhat: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(y.len(), yhat.len());
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(y.len());
    for (&a, &b) in y.iter().zip(yhat) {
        let r = a - b;
        loss += r * r;
        grad.push(-2.0 * r);
    }
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BayesLoss {
    pub value: f64,
    pub grad_yhat: Vec<f64>,
    pub grad_u: Vec<f64>,
}

/// `sum r^2 / (2u) + ln(u) / 2` with `r = y - yhat`.
pub fn bayes_loss_slice(y: &[f64], yhat: &[f64], u: &[f64]) -> Result<BayesLoss> {
    assert!(y.len() == yhat.len() && y.len() == u.len());
    if let Some(i) = u.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::NonPositiveAleatoric { index: i, value: u[i] });
    }
    let mut value = 0.0;
    let mut grad_yhat = Vec::with_capacity(y.len());
    let mut grad_u = Vec::with_capacity(y.len());
    for k in 0..y.len() {
        let r = y[k] - yhat[k];
        let uk = u[k];
        value += r * r / (2.0 * uk) + 0.5 * uk.ln();
        grad_yhat.push(-r / uk);
        grad_u.push(-r * r / (2.0 * uk * uk) + 0.5 / uk);
    }
    Ok(BayesLoss { value, grad_yhat, grad_u })
}

fn widen(v: &Volume3D) -> Vec<f64> {
    v.data().iter().map(|&x| x as f64).collect()
}

fn check_shapes(a: &Volume3D, b: &Volume3D) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

pub fn l2_loss(y: &Volume3D, yhat: &Volume3D) -> Result<(f64, Vec<f64>)> {
    check_shapes(y, yhat)?;
    Ok(l2_loss_slice(&widen(y), &widen(yhat)))
}

pub fn bayes_loss(y: &Volume3D, yhat: &Volume3D, u: &Volume3D) -> Result<BayesLoss> {
    check_shapes(y, yhat)?;
    check_shapes(y, u)?;
    bayes_loss_slice(&widen(y), &widen(yhat), &widen(u))
}

/// Mean map plus the two uncertainty maps.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorOutput {
    pub dm: Volume3D,
    pub aleatoric: Volume3D,
    pub epistemic: Volume3D,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegressorManifest {
    format: String,
    version: u32,
    shape: [usize; 3],
    voxel_size_um: [f64; 3],
    dm: String,
    aleatoric: String,
    epistemic: String,
}

impl RegressorOutput {
    pub fn new(dm: Volume3D, aleatoric: Volume3D, epistemic: Volume3D) -> Result<Self> {
        check_shapes(&dm, &aleatoric)?;
        check_shapes(&dm, &epistemic)?;
        if !dm.same_grid(&aleatoric) || !dm.same_grid(&epistemic) {
            return Err(Error::Format("regressor maps have different voxel sizes".into()));
        }
        for (name, m) in [("aleatoric", &aleatoric), ("epistemic", &epistemic)] {
            if m.data().iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::Format(format!("{name} map has negative or NaN values")));
            }
        }
        Ok(RegressorOutput { dm, aleatoric, epistemic })
    }

    /// Writes `dm.raw`, `aleatoric.raw`, `epistemic.raw` (each with its sidecar)
    /// and a shared `regressor.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.dm.save(dir.join("dm.raw"))?;
        self.aleatoric.save(dir.join("aleatoric.raw"))?;
        self.epistemic.save(dir.join("epistemic.raw"))?;
        let m = RegressorManifest {
            format: "probdetect-regressor".into(),
            version: 1,
            shape: self.dm.shape(),
            voxel_size_um: self.dm.voxel_size(),
            dm: "dm.raw".into(),
            aleatoric: "aleatoric.raw".into(),
            epistemic: "epistemic.raw".into(),
        };
        std::fs::write(dir.join("regressor.json"), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m: RegressorManifest = serde_json::from_slice(&std::fs::read(dir.join("regressor.json"))?)?;
        if m.version != 1 {
            return Err(Error::Format(format!("unsupported regressor manifest version {}", m.version)));
        }
        let out = RegressorOutput::new(
            Volume3D::load(dir.join(&m.dm))?,
            Volume3D::load(dir.join(&m.aleatoric))?,
            Volume3D::load(dir.join(&m.epistemic))?,
        )?;
        if out.dm.shape() != m.shape {
            return Err(Error::ShapeMismatch(m.shape, out.dm.shape()));
        }
        Ok(out)
    }
}

/// Per-voxel mean of the predictions and aleatoric maps, and population SD of
/// the predictions. Values are sorted per voxel before summing so the result
/// does not depend on sample order.
pub fn mc_aggregate(samples: &[(Volume3D, Volume3D)]) -> Result<RegressorOutput> {
    let Some(first) = samples.first() else {
        return Err(Error::EmptySampleList);
    };
    let shape = first.0.shape();
    let vs = first.0.voxel_size();
    for (y, u) in samples {
        check_shapes(&first.0, y)?;
        check_shapes(&first.0, u)?;
        if let Some(i) = u.data().iter().position(|&v| !(v >= 0.0)) {
            return Err(Error::NonPositiveAleatoric { index: i, value: u.data()[i] as f64 });
        }
    }
    let t = samples.len() as f64;
    let n = first.0.len();
    let stats: Vec<(f32, f32, f32)> = (0..n)
        .into_par_iter()
        .map_init(
            || (Vec::with_capacity(samples.len()), Vec::with_capacity(samples.len())),
            |(ys, us), k| {
                ys.clear();
                us.clear();
                ys.extend(samples.iter().map(|s| s.0.data()[k] as f64));
                us.extend(samples.iter().map(|s| s.1.data()[k] as f64));
                ys.sort_by(f64::total_cmp);
                us.sort_by(f64::total_cmp);
                let mean = ys.iter().sum::<f64>() / t;
                let var = ys.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t;
                let ua = us.iter().sum::<f64>() / t;
                (mean as f32, ua as f32, var.sqrt() as f32)
            },
        )
        .collect();
    let dm = Volume3D::from_vec(shape, vs, stats.iter().map(|s| s.0).collect())?;
    let aleatoric = Volume3D::from_vec(shape, vs, stats.iter().map(|s| s.1).collect())?;
    let epistemic = Volume3D::from_vec(shape, vs, stats.iter().map(|s| s.2).collect())?;
    Ok(RegressorOutput { dm, aleatoric, epistemic })
}
