//! Fully connected network with ReLU hidden layers and a logistic output,
//! trained with Adam on binary cross-entropy.
//!
//! Inputs are standardized with statistics of the training split; the
//! statistics are stored in the model so prediction takes raw features.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forest::check_labels;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: vec![50, 50, 20, 20],
            epochs: 200,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 200,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Dense layer; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub n_features: usize,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub layers: Vec<Layer>,
    /// Epoch whose weights were kept (0 = initialization).
    pub best_epoch: usize,
    pub validation_accuracy: Option<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl MlpModel {
    /// Glorot-uniform weights, zero biases, identity input scaling.
    pub fn init(n_features: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![n_features];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let layers = widths
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Layer {
                    inputs: w[0],
                    outputs: w[1],
                    weights: (0..w[0] * w[1]).map(|_| rng.random_range(-limit..limit)).collect(),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        MlpModel {
            n_features,
            input_mean: vec![0.0; n_features],
            input_scale: vec![1.0; n_features],
            layers,
            best_epoch: 0,
            validation_accuracy: None,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            p.extend_from_slice(&l.weights);
            p.extend_from_slice(&l.bias);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params());
        let mut o = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[o..o + nw]);
            o += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[o..o + nb]);
            o += nb;
        }
    }

    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.input_mean).zip(&self.input_scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    /// Activations of every layer; the last entry holds the output logit.
    fn forward(&self, x: Vec<f64>) -> Vec<Vec<f64>> {
        let mut acts = vec![x];
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let input = acts.last().unwrap();
            let mut out = l.bias.clone();
            for (o, v) in out.iter_mut().enumerate() {
                let w = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                *v += w.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                if li != last {
                    *v = v.max(0.0);
                }
            }
            acts.push(out);
        }
        acts
    }

    pub fn logit(&self, row: &[f64]) -> f64 {
        self.forward(self.standardize(row)).last().unwrap()[0]
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        sigmoid(self.logit(row))
    }

    pub fn predict_proba(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        if x.cols != self.n_features {
            return Err(Error::DimensionMismatch { expected: self.n_features, got: x.cols });
        }
        Ok((0..x.rows).into_par_iter().map(|i| self.predict_row(x.row(i))).collect())
    }

    /// Mean binary cross-entropy over `rows` and its gradient with respect to
    /// [`MlpModel::params`].
    pub fn loss_and_gradient(&self, x: &FeatureMatrix, labels: &[u8], rows: &[usize]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.num_params()];
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut o = 0;
        for l in &self.layers {
            offsets.push(o);
            o += l.weights.len() + l.bias.len();
        }
        let mut loss = 0.0;
        for &i in rows {
            let acts = self.forward(self.standardize(x.row(i)));
            let z = acts.last().unwrap()[0];
            let y = labels[i] as f64;
            loss += softplus(z) - y * z;
            let mut delta = vec![sigmoid(z) - y];
            for li in (0..self.layers.len()).rev() {
                let l = &self.layers[li];
                let input = &acts[li];
                let off = offsets[li];
                for (oi, d) in delta.iter().enumerate() {
                    let gw = &mut grad[off + oi * l.inputs..off + (oi + 1) * l.inputs];
                    for (g, a) in gw.iter_mut().zip(input) {
                        *g += d * a;
                    }
                    grad[off + l.weights.len() + oi] += d;
                }
                if li > 0 {
                    let mut prev = vec![0.0; l.inputs];
                    for (oi, d) in delta.iter().enumerate() {
                        let w = &l.weights[oi * l.inputs..(oi + 1) * l.inputs];
                        for (p, wv) in prev.iter_mut().zip(w) {
                            *p += d * wv;
                        }
                    }
                    for (p, a) in prev.iter_mut().zip(input) {
                        if *a <= 0.0 {
                            *p = 0.0;
                        }
                    }
                    delta = prev;
                }
            }
        }
        let n = rows.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }

    fn accuracy(&self, x: &FeatureMatrix, labels: &[u8], rows: &[usize]) -> f64 {
        let correct = rows.iter().filter(|&&i| ((self.predict_row(x.row(i)) >= 0.5) as u8) == labels[i]).count();
        correct as f64 / rows.len() as f64
    }

    pub(crate) fn check(&self) -> Result<()> {
        let mut prev = self.n_features;
        for l in &self.layers {
            if l.inputs != prev || l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::Format("MLP layer shapes are inconsistent".into()));
            }
            prev = l.outputs;
        }
        if prev != 1 || self.input_mean.len() != self.n_features || self.input_scale.len() != self.n_features {
            return Err(Error::Format("MLP input/output shapes are inconsistent".into()));
        }
        if self.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("MLP has non-finite weights".into()));
        }
        Ok(())
    }
}

/// Trains on a random `1 - validation_fraction` share of the rows and keeps the
/// epoch with the best accuracy on the rest.
pub fn train_mlp(x: &FeatureMatrix, labels: &[u8], cfg: &MlpConfig) -> Result<MlpModel> {
    check_labels(x, labels)?;
    if !(0.0..1.0).contains(&cfg.validation_fraction) || x.rows < 2 {
        return Err(Error::InvalidConfig("validation_fraction must be in [0, 1) and >= 2 rows are needed".into()));
    }
    let mut idx: Vec<usize> = (0..x.rows).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed));
    let n_val = ((x.rows as f64 * cfg.validation_fraction).ceil() as usize).min(x.rows - 1);
    let (val, train) = idx.split_at(n_val);
    train_mlp_split(x, labels, train, val, cfg)
}

/// Training with explicit train / validation row indices. An empty validation
/// set keeps the last epoch.
pub fn train_mlp_split(
    x: &FeatureMatrix,
    labels: &[u8],
    train: &[usize],
    val: &[usize],
    cfg: &MlpConfig,
) -> Result<MlpModel> {
    check_labels(x, labels)?;
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) || train.is_empty() || cfg.hidden.contains(&0) {
        return Err(Error::InvalidConfig(
            "MLP needs batch_size > 0, learning_rate > 0, non-empty layers and training rows".into(),
        ));
    }
    let d = x.cols;
    let mut model = MlpModel::init(d, &cfg.hidden, cfg.seed);
    let n = train.len() as f64;
    for j in 0..d {
        let mean = train.iter().map(|&i| x.get(i, j)).sum::<f64>() / n;
        let var = train.iter().map(|&i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / n;
        model.input_mean[j] = mean;
        model.input_scale[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let mut best = model.clone();
    let mut best_acc = if val.is_empty() { None } else { Some(model.accuracy(x, labels, val)) };
    best.validation_accuracy = best_acc;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut params = model.params();
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut step = 0i32;
    let mut order = train.to_vec();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            model.set_params(&params);
            let (loss, g) = model.loss_and_gradient(x, labels, batch);
            if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch });
            }
            step += 1;
            let c1 = 1.0 - cfg.beta1.powi(step);
            let c2 = 1.0 - cfg.beta2.powi(step);
            for k in 0..params.len() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                params[k] -= cfg.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.epsilon);
            }
        }
        model.set_params(&params);
        match best_acc {
            Some(b) => {
                let acc = model.accuracy(x, labels, val);
                if acc > b {
                    best_acc = Some(acc);
                    best = model.clone();
                    best.best_epoch = epoch;
                    best.validation_accuracy = Some(acc);
                }
            }
            None => {
                best = model.clone();
                best.best_epoch = epoch;
            }
        }
    }
    Ok(best)
}
