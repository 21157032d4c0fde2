//! Distance-based spatial statistics of cells relative to segmented structures.
//!
//! The empty-space distance (ESD) pool holds the distance of every tissue
//! voxel outside the structure to the nearest structure voxel. Cells are
//! compared against it either deterministically (cells with `p >= 0.5`) or by
//! Monte-Carlo replicates that keep each cell with its probability.

pub mod cdf;
pub mod edt;
pub mod stats;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cdf::{cdf_on_grid, kde_cdf, linspace, scott_bandwidth, CdfMode, EmpiricalCdf};
pub use edt::edt_from;
pub use stats::{ks_2sample, wilcoxon_signed_rank, TestResult, WilcoxonResult};

use crate::classifier::POSITIVE_THRESHOLD;
use crate::coords::CoordSet;
use crate::error::{Error, Result};
use crate::evalmetrics::MeanSd;
use crate::volume::Volume3D;

const UM3_PER_MM3: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRole {
    Structure,
    Tissue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub role: MaskRole,
    pub mask: Volume3D<u8>,
}

impl BinaryMask {
    pub fn new(role: MaskRole, mask: Volume3D<u8>) -> Result<Self> {
        if mask.data().iter().any(|&v| v > 1) {
            return Err(Error::Format("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask { role, mask })
    }

    pub fn from_fn(
        role: MaskRole,
        shape: [usize; 3],
        voxel_size: [f64; 3],
        f: impl Fn([usize; 3]) -> bool,
    ) -> Result<Self> {
        let mut m = Volume3D::filled(shape, voxel_size, 0u8)?;
        for i in 0..m.len() {
            if f(m.unravel(i)) {
                m.data_mut()[i] = 1;
            }
        }
        Ok(BinaryMask { role, mask: m })
    }

    /// Accepts a float volume holding only 0 and 1.
    pub fn from_volume(role: MaskRole, v: &Volume3D) -> Result<Self> {
        if v.data().iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(Error::Format("mask volume must contain only 0 and 1".into()));
        }
        Ok(BinaryMask { role, mask: v.map(|x| x as u8) })
    }

    pub fn to_volume(&self) -> Volume3D {
        self.mask.map(|x| x as f32)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_volume().save(path)
    }

    pub fn load(role: MaskRole, path: impl AsRef<Path>) -> Result<Self> {
        BinaryMask::from_volume(role, &Volume3D::load(path)?)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.mask.shape()
    }

    pub fn is_set(&self, i: usize) -> bool {
        self.mask.data()[i] == 1
    }

    pub fn count(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 1).count()
    }
}

/// Distance to the nearest foreground voxel, in micrometers.
pub fn distance_transform(structure: &BinaryMask) -> Result<Volume3D<f64>> {
    let d = structure.mask.data();
    edt_from(structure.shape(), structure.mask.voxel_size(), |i| d[i] == 1)
}

fn check_grid(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(a.shape(), b.shape()));
    }
    if !a.mask.same_grid(&b.mask) {
        return Err(Error::Format("masks have different voxel sizes".into()));
    }
    Ok(())
}

/// EDT values over tissue voxels outside the structure.
pub fn esd_samples(edt: &Volume3D<f64>, structure: &BinaryMask, tissue: &BinaryMask) -> Result<Vec<f64>> {
    check_grid(structure, tissue)?;
    let pool: Vec<f64> =
        (0..edt.len()).filter(|&i| tissue.is_set(i) && !structure.is_set(i)).map(|i| edt.data()[i]).collect();
    if pool.is_empty() {
        return Err(Error::DegenerateEsd);
    }
    Ok(pool)
}

pub fn esd_cdf(structure: &BinaryMask, tissue: &BinaryMask) -> Result<EmpiricalCdf> {
    let edt = distance_transform(structure)?;
    Ok(EmpiricalCdf::new(esd_samples(&edt, structure, tissue)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceLookup {
    Trilinear,
    Nearest,
}

pub fn cell_distances(cells: &CoordSet, edt: &Volume3D<f64>, lookup: DistanceLookup) -> Result<Vec<f64>> {
    cells
        .points
        .iter()
        .map(|p| {
            let v = edt.voxel_of(p).ok_or_else(|| Error::Format(format!("cell {p:?} lies outside the volume")))?;
            Ok(match lookup {
                DistanceLookup::Trilinear => edt.sample_trilinear(p),
                DistanceLookup::Nearest => edt.get(v[0], v[1], v[2]),
            })
        })
        .collect()
}

pub fn cell_distance_cdf(cells: &CoordSet, edt: &Volume3D<f64>) -> Result<EmpiricalCdf> {
    if cells.is_empty() {
        return Err(Error::EmptyCells);
    }
    Ok(EmpiricalCdf::new(cell_distances(cells, edt, DistanceLookup::Trilinear)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialConfig {
    pub adjacency_um: f64,
    pub replicates: usize,
    pub seed: u64,
    pub grid_points: usize,
    pub cdf_mode: CdfMode,
    pub lookup: DistanceLookup,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        SpatialConfig {
            adjacency_um: 4.0,
            replicates: 50,
            seed: 0,
            grid_points: 512,
            cdf_mode: CdfMode::Kde,
            lookup: DistanceLookup::Trilinear,
        }
    }
}

impl SpatialConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adjacency_um > 0.0) || self.grid_points < 2 {
            return Err(Error::InvalidConfig("adjacency must be > 0 and the grid needs >= 2 points".into()));
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        2.0 / (self.replicates as f64 + 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Envelope {
    fn from_curves(curves: &[&Vec<f64>], n: usize) -> Option<Envelope> {
        if curves.is_empty() {
            return None;
        }
        let mut lower = vec![f64::INFINITY; n];
        let mut upper = vec![f64::NEG_INFINITY; n];
        for c in curves {
            for k in 0..n {
                lower[k] = lower[k].min(c[k]);
                upper[k] = upper[k].max(c[k]);
            }
        }
        Some(Envelope { lower, upper })
    }

    pub fn contains(&self, curve: &[f64]) -> Vec<bool> {
        curve.iter().enumerate().map(|(k, &v)| self.lower[k] <= v && v <= self.upper[k]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisMode {
    Deterministic,
    Probabilistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialReport {
    pub mode: AnalysisMode,
    pub adjacency_um: f64,
    pub cdf_mode: CdfMode,
    pub n_cells: MeanSd,
    pub density_per_mm3: MeanSd,
    pub pct_cells_adjacent: MeanSd,
    pub pct_volume_adjacent: f64,
    pub grid_um: Vec<f64>,
    /// Deterministic: CDF of the selected cells. Probabilistic: pointwise mean
    /// of the replicate CDFs.
    pub cell_cdf: Option<Vec<f64>>,
    /// Empirical CDF of the full ESD pool.
    pub esd_cdf: Vec<f64>,
    pub cell_envelope: Option<Envelope>,
    pub esd_envelope: Option<Envelope>,
    pub replicates: usize,
    /// Replicates that kept at least one cell; only these enter the envelopes.
    pub nonempty_replicates: usize,
    pub alpha: Option<f64>,
    /// No cell was selected (deterministic) or every replicate was empty.
    pub empty_cells: bool,
    pub ks_cells_vs_esd: Option<TestResult>,
}

/// Precomputed masks, EDT and ESD pool shared by both analyses.
pub struct SpatialContext {
    pub edt: Volume3D<f64>,
    pub tissue: BinaryMask,
    pub esd_pool: Vec<f64>,
    pub tissue_voxels: usize,
    pub pct_volume_adjacent: f64,
    adjacency_um: f64,
}

impl SpatialContext {
    pub fn new(structure: &BinaryMask, tissue: &BinaryMask, adjacency_um: f64) -> Result<Self> {
        check_grid(structure, tissue)?;
        let edt = distance_transform(structure)?;
        let esd_pool = esd_samples(&edt, structure, tissue)?;
        let tissue_voxels = tissue.count();
        let near = (0..edt.len()).filter(|&i| tissue.is_set(i) && edt.data()[i] < adjacency_um).count();
        Ok(SpatialContext {
            pct_volume_adjacent: 100.0 * near as f64 / tissue_voxels as f64,
            edt,
            tissue: tissue.clone(),
            esd_pool,
            tissue_voxels,
            adjacency_um,
        })
    }

    pub fn tissue_volume_um3(&self) -> f64 {
        self.tissue_voxels as f64 * self.edt.voxel_volume()
    }

    /// Indices of cells that lie inside the tissue mask.
    pub fn cells_in_tissue(&self, cells: &CoordSet) -> Vec<usize> {
        (0..cells.len())
            .filter(|&i| {
                self.edt
                    .voxel_of(&cells.points[i])
                    .is_some_and(|v| self.tissue.is_set(self.edt.index(v[0], v[1], v[2])))
            })
            .collect()
    }

    fn grid(&self, cell_d: &[f64], n: usize) -> Vec<f64> {
        let max = self.esd_pool.iter().chain(cell_d).copied().fold(0.0, f64::max);
        linspace(0.0, max, n)
    }

    fn summary(&self, d: &[f64]) -> (f64, f64, f64) {
        let n = d.len() as f64;
        let density = n / self.tissue_volume_um3() * UM3_PER_MM3;
        let adj =
            if d.is_empty() { 0.0 } else { 100.0 * d.iter().filter(|&&v| v < self.adjacency_um).count() as f64 / n };
        (n, density, adj)
    }

    fn check_cfg(&self, cfg: &SpatialConfig) -> Result<()> {
        cfg.validate()?;
        if cfg.adjacency_um != self.adjacency_um {
            return Err(Error::InvalidConfig("context was built with a different adjacency distance".into()));
        }
        Ok(())
    }

    pub fn analyze_deterministic(&self, cells: &CoordSet, cfg: &SpatialConfig) -> Result<SpatialReport> {
        self.check_cfg(cfg)?;
        let in_tissue = self.cells_in_tissue(cells);
        let sel: Vec<usize> = in_tissue.into_iter().filter(|&i| cells.prob(i) >= POSITIVE_THRESHOLD).collect();
        let d = cell_distances(&cells.select(&sel), &self.edt, cfg.lookup)?;
        let grid = self.grid(&d, cfg.grid_points);
        let (n, density, adj) = self.summary(&d);
        let exact = |v: f64| MeanSd { mean: v, sd: 0.0 };
        Ok(SpatialReport {
            mode: AnalysisMode::Deterministic,
            adjacency_um: cfg.adjacency_um,
            cdf_mode: cfg.cdf_mode,
            n_cells: exact(n),
            density_per_mm3: exact(density),
            pct_cells_adjacent: exact(adj),
            pct_volume_adjacent: self.pct_volume_adjacent,
            cell_cdf: (!d.is_empty()).then(|| cdf_on_grid(&d, &grid, cfg.cdf_mode)),
            esd_cdf: EmpiricalCdf::new(self.esd_pool.clone()).eval_grid(&grid),
            grid_um: grid,
            cell_envelope: None,
            esd_envelope: None,
            replicates: 1,
            nonempty_replicates: (!d.is_empty()) as usize,
            alpha: None,
            empty_cells: d.is_empty(),
            ks_cells_vs_esd: if d.is_empty() { None } else { Some(ks_2sample(&d, &self.esd_pool)?) },
        })
    }

    pub fn analyze_probabilistic(&self, cells: &CoordSet, cfg: &SpatialConfig) -> Result<SpatialReport> {
        self.check_cfg(cfg)?;
        if cfg.replicates < 2 {
            return Err(Error::InvalidConfig("probabilistic analysis needs >= 2 replicates".into()));
        }
        let in_tissue = self.cells_in_tissue(cells);
        let probs: Vec<f64> = in_tissue.iter().map(|&i| cells.prob(i)).collect();
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Format("probabilities must lie in [0, 1]".into()));
        }
        let all_d = cell_distances(&cells.select(&in_tissue), &self.edt, cfg.lookup)?;
        let grid = self.grid(&all_d, cfg.grid_points);

        struct Replicate {
            summary: (f64, f64, f64),
            cell_cdf: Option<Vec<f64>>,
            esd_cdf: Option<Vec<f64>>,
            distances: Vec<f64>,
        }
        let reps: Vec<Replicate> = (0..cfg.replicates)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(t as u64));
                let d: Vec<f64> =
                    all_d.iter().zip(&probs).filter(|(_, &p)| rng.random::<f64>() < p).map(|(&d, _)| d).collect();
                let summary = self.summary(&d);
                if d.is_empty() {
                    return Replicate { summary, cell_cdf: None, esd_cdf: None, distances: d };
                }
                let w = Poisson::new(d.len() as f64).expect("positive mean").sample(&mut rng) as usize;
                let esd_cdf = (w > 0).then(|| {
                    let draws: Vec<f64> =
                        (0..w).map(|_| self.esd_pool[rng.random_range(0..self.esd_pool.len())]).collect();
                    cdf_on_grid(&draws, &grid, cfg.cdf_mode)
                });
                Replicate { summary, cell_cdf: Some(cdf_on_grid(&d, &grid, cfg.cdf_mode)), esd_cdf, distances: d }
            })
            .collect();

        let n = grid.len();
        let cell_curves: Vec<&Vec<f64>> = reps.iter().filter_map(|r| r.cell_cdf.as_ref()).collect();
        let esd_curves: Vec<&Vec<f64>> = reps.iter().filter_map(|r| r.esd_cdf.as_ref()).collect();
        let nonempty = cell_curves.len();
        let mean_curve = (nonempty > 0).then(|| {
            (0..n).map(|k| cell_curves.iter().map(|c| c[k]).sum::<f64>() / nonempty as f64).collect::<Vec<f64>>()
        });
        let col = |f: fn(&(f64, f64, f64)) -> f64, only_nonempty: bool| {
            MeanSd::of(
                &reps
                    .iter()
                    .filter(|r| !only_nonempty || r.cell_cdf.is_some())
                    .map(|r| f(&r.summary))
                    .collect::<Vec<_>>(),
            )
        };
        let pooled: Vec<f64> = reps.iter().flat_map(|r| r.distances.iter().copied()).collect();
        Ok(SpatialReport {
            mode: AnalysisMode::Probabilistic,
            adjacency_um: cfg.adjacency_um,
            cdf_mode: cfg.cdf_mode,
            n_cells: col(|s| s.0, false),
            density_per_mm3: col(|s| s.1, false),
            pct_cells_adjacent: if nonempty > 0 { col(|s| s.2, true) } else { MeanSd { mean: 0.0, sd: 0.0 } },
            pct_volume_adjacent: self.pct_volume_adjacent,
            cell_cdf: mean_curve,
            esd_cdf: EmpiricalCdf::new(self.esd_pool.clone()).eval_grid(&grid),
            grid_um: grid,
            cell_envelope: Envelope::from_curves(&cell_curves, n),
            esd_envelope: Envelope::from_curves(&esd_curves, n),
            replicates: cfg.replicates,
            nonempty_replicates: nonempty,
            alpha: Some(cfg.alpha()),
            empty_cells: nonempty == 0,
            ks_cells_vs_esd: if pooled.is_empty() { None } else { Some(ks_2sample(&pooled, &self.esd_pool)?) },
        })
    }
}

pub fn analyze_deterministic(
    cells: &CoordSet,
    structure: &BinaryMask,
    tissue: &BinaryMask,
    cfg: &SpatialConfig,
) -> Result<SpatialReport> {
    SpatialContext::new(structure, tissue, cfg.adjacency_um)?.analyze_deterministic(cells, cfg)
}

pub fn analyze_probabilistic(
    cells: &CoordSet,
    structure: &BinaryMask,
    tissue: &BinaryMask,
    cfg: &SpatialConfig,
) -> Result<SpatialReport> {
    SpatialContext::new(structure, tissue, cfg.adjacency_um)?.analyze_probabilistic(cells, cfg)
}

impl SpatialReport {
    /// Plot-ready table: distance, cell CDF, ESD CDF and envelope bounds.
    pub fn write_curves_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["distance_um", "cell_cdf", "esd_cdf", "cell_lower", "cell_upper", "esd_lower", "esd_upper"])?;
        let opt = |v: Option<&Vec<f64>>, k: usize| v.map_or(String::new(), |c| c[k].to_string());
        for k in 0..self.grid_um.len() {
            wr.write_record([
                self.grid_um[k].to_string(),
                opt(self.cell_cdf.as_ref(), k),
                self.esd_cdf[k].to_string(),
                opt(self.cell_envelope.as_ref().map(|e| &e.lower), k),
                opt(self.cell_envelope.as_ref().map(|e| &e.upper), k),
                opt(self.esd_envelope.as_ref().map(|e| &e.lower), k),
                opt(self.esd_envelope.as_ref().map(|e| &e.upper), k),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slab_masks(n: usize) -> (BinaryMask, BinaryMask) {
        let s = BinaryMask::from_fn(MaskRole::Structure, [n, n, n], [1.0; 3], |v| v[2] == 0).unwrap();
        let t = BinaryMask::from_fn(MaskRole::Tissue, [n, n, n], [1.0; 3], |_| true).unwrap();
        (s, t)
    }

    #[test]
    fn esd_of_slab_is_uniform() {
        let (s, t) = slab_masks(10);
        let c = esd_cdf(&s, &t).unwrap();
        assert_eq!(c.len(), 900);
        for k in 1..=9 {
            assert!((c.eval(k as f64) - k as f64 / 9.0).abs() < 1e-12);
        }
        assert!(matches!(esd_cdf(&s, &s), Err(Error::DegenerateEsd)));
    }

    #[test]
    fn cell_at_known_offset() {
        let (s, _) = slab_masks(10);
        let edt = distance_transform(&s).unwrap();
        let c = cell_distance_cdf(&CoordSet::new(vec![[5.0, 5.0, 3.5]]), &edt).unwrap();
        assert_eq!(c.samples(), &[3.0]);
        let on = cell_distance_cdf(&CoordSet::new(vec![[0.5, 2.5, 0.5], [7.5, 1.5, 0.5]]), &edt).unwrap();
        assert_eq!(on.eval(0.0), 1.0);
        assert!(matches!(cell_distance_cdf(&CoordSet::new(vec![]), &edt), Err(Error::EmptyCells)));
    }

    #[test]
    fn density_units() {
        // 100^3 voxels of 1 um = 1e6 um^3 = 1e-3 mm^3
        let s = BinaryMask::from_fn(MaskRole::Structure, [100, 100, 100], [1.0; 3], |v| v == [0, 0, 0]).unwrap();
        let t = BinaryMask::from_fn(MaskRole::Tissue, [100, 100, 100], [1.0; 3], |_| true).unwrap();
        let cells = CoordSet::with_p((0..10).map(|i| [50.5, 50.5, 10.5 + 5.0 * i as f64]).collect(), vec![1.0; 10]);
        let r = analyze_deterministic(&cells, &s, &t, &SpatialConfig::default()).unwrap();
        assert!((r.density_per_mm3.mean - 1e4).abs() < 1e-6);
        assert_eq!(r.pct_cells_adjacent.mean, 0.0);
        let low = CoordSet::with_p(cells.points.clone(), vec![0.49; 10]);
        let r = analyze_deterministic(&low, &s, &t, &SpatialConfig::default()).unwrap();
        assert!(r.empty_cells);
        assert_eq!(r.density_per_mm3.mean, 0.0);
    }

    #[test]
    fn certain_cells_collapse_envelopes() {
        let (s, t) = slab_masks(16);
        let cells = CoordSet::with_p((0..12).map(|i| [8.0, 8.0, 1.0 + i as f64]).collect(), vec![1.0; 12]);
        let cfg = SpatialConfig { replicates: 10, ..Default::default() };
        let ctx = SpatialContext::new(&s, &t, cfg.adjacency_um).unwrap();
        let p = ctx.analyze_probabilistic(&cells, &cfg).unwrap();
        let d = ctx.analyze_deterministic(&cells, &cfg).unwrap();
        let env = p.cell_envelope.as_ref().unwrap();
        assert_eq!(&env.lower, d.cell_cdf.as_ref().unwrap());
        assert_eq!(&env.upper, d.cell_cdf.as_ref().unwrap());
        assert_eq!(p.n_cells.sd, 0.0);
        assert_eq!(p.pct_cells_adjacent.sd, 0.0);
        assert_eq!(p.alpha, Some(2.0 / 11.0));
    }

    #[test]
    fn half_probability_counts_are_binomial() {
        let (s, t) = slab_masks(20);
        let n = 400;
        let cells = CoordSet::with_p(
            (0..n).map(|i| [0.5 + (i % 20) as f64, 0.5 + (i / 20) as f64, 10.5]).collect(),
            vec![0.5; n],
        );
        let r = analyze_probabilistic(&cells, &s, &t, &SpatialConfig::default()).unwrap();
        let bound = 3.0 * (n as f64 / 4.0).sqrt();
        assert!((r.n_cells.mean - n as f64 / 2.0).abs() < bound);
        assert_eq!(r.alpha, Some(2.0 / 51.0));
        let env = r.esd_envelope.unwrap();
        assert!(env.lower.iter().zip(&env.upper).all(|(l, u)| l <= u));
        assert!(r.cell_cdf.unwrap().windows(2).all(|w| w[0] <= w[1] + 1e-15));
    }
}
