//! Synthetic scenes: separated cell coordinates, tube-shaped structures inside
//! an ellipsoidal tissue mask, and an oracle regressor that turns ground truth
//! into noisy density, aleatoric and epistemic maps.
//!
//! Noise lives only near objects: its SD field is `noise.sd` times a broad
//! unit-peak halo around every cell and distractor, so empty space stays at 0
//! and does not flood the proposal stage.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayescore::RegressorOutput;
use crate::coords::{dist2, CoordSet};
use crate::densitymap::{render_weighted, Amplitude, Compounding, KernelSpec};
use crate::error::{Error, Result};
use crate::spatial::{BinaryMask, MaskRole};
use crate::volume::{voxel_center, Volume3D, VoxelBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Additive Gaussian SD at the centre of an object, in units of the peak.
    pub sd: f64,
    /// Width of the halo carrying the noise.
    pub halo_um: f64,
    /// Cell amplitudes are drawn from `[1 - jitter, 1]`.
    pub amplitude_jitter: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { sd: 0.05, halo_um: 6.0, amplitude_jitter: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistractorSpec {
    pub count: usize,
    pub amplitude: [f64; 2],
}

impl Default for DistractorSpec {
    fn default() -> Self {
        DistractorSpec { count: 20, amplitude: [0.3, 0.7] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StructureSpec {
    pub tubes: usize,
    pub radius_um: f64,
    pub length_um: f64,
    pub step_um: f64,
    /// Ellipsoid semi-axes as a fraction of half the volume extent.
    pub tissue_scale: f64,
}

impl Default for StructureSpec {
    fn default() -> Self {
        StructureSpec { tubes: 3, radius_um: 3.0, length_um: 120.0, step_um: 2.0, tissue_scale: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub shape: [usize; 3],
    pub voxel_size_um: [f64; 3],
    pub n_cells: usize,
    pub min_separation_um: f64,
    pub cells_in_tissue: bool,
    pub kernel: KernelSpec,
    pub noise: NoiseSpec,
    pub distractors: DistractorSpec,
    pub structures: StructureSpec,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            shape: [64, 64, 64],
            voxel_size_um: [1.0; 3],
            n_cells: 50,
            min_separation_um: 8.0,
            cells_in_tissue: true,
            kernel: KernelSpec {
                sigma_um: 2.0,
                cutoff_um: 16.0,
                compounding: Compounding::Max,
                amplitude: Amplitude::UnitPeak,
            },
            noise: NoiseSpec::default(),
            distractors: DistractorSpec::default(),
            structures: StructureSpec::default(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if self.shape.contains(&0) || self.voxel_size_um.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidConfig(
                "synthetic volume needs a non-empty shape and positive voxel size".into(),
            ));
        }
        if !(self.min_separation_um > 0.0) || self.noise.sd < 0.0 || !(self.noise.halo_um > 0.0) {
            return Err(Error::InvalidConfig("min separation and halo must be > 0, noise SD >= 0".into()));
        }
        let [a, b] = self.distractors.amplitude;
        if !(0.0..=1.0).contains(&self.noise.amplitude_jitter) || !(0.0 <= a && a <= b) {
            return Err(Error::InvalidConfig("jitter must be in [0, 1] and distractor amplitudes ordered".into()));
        }
        let s = &self.structures;
        if !(s.radius_um >= 0.0 && s.step_um > 0.0 && s.length_um >= 0.0 && s.tissue_scale > 0.0) {
            return Err(Error::InvalidConfig("invalid structure parameters".into()));
        }
        Ok(())
    }

    pub fn extent_um(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.shape[a] as f64 * self.voxel_size_um[a])
    }

    /// Whether `p` lies inside the tissue ellipsoid.
    pub fn in_tissue(&self, p: &[f64; 3]) -> bool {
        let e = self.extent_um();
        let r: f64 = (0..3)
            .map(|a| {
                let semi = 0.5 * e[a] * self.structures.tissue_scale;
                ((p[a] - 0.5 * e[a]) / semi).powi(2)
            })
            .sum();
        r <= 1.0
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }
}

const STREAM_CELLS: u64 = 1;
const STREAM_AMPLITUDES: u64 = 2;
const STREAM_TUBES: u64 = 3;
const STREAM_NOISE: u64 = 1 << 32;

/// Rejection sampling of `n` points with pairwise separation `>= min_sep`.
/// Points are uniform in the volume, restricted to `accept`.
pub fn sample_separated(
    n: usize,
    extent: [f64; 3],
    min_sep: f64,
    rng: &mut ChaCha8Rng,
    accept: impl Fn(&[f64; 3]) -> bool,
) -> Result<Vec<[f64; 3]>> {
    let mut pts: Vec<[f64; 3]> = Vec::with_capacity(n);
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    let key = |p: &[f64; 3]| p.map(|v| (v / min_sep).floor() as i64);
    let max_attempts = 2000 * n + 10_000;
    let mut attempts = 0;
    while pts.len() < n && attempts < max_attempts {
        attempts += 1;
        let p = [0, 1, 2].map(|a| rng.random::<f64>() * extent[a]);
        if !accept(&p) {
            continue;
        }
        let k = key(&p);
        let mut ok = true;
        'outer: for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(list) = grid.get(&[k[0] + dz, k[1] + dy, k[2] + dx]) {
                        if list.iter().any(|&j| dist2(&pts[j], &p) < min_sep * min_sep) {
                            ok = false;
                            break 'outer;
                        }
                    }
                }
            }
        }
        if ok {
            grid.entry(k).or_default().push(pts.len());
            pts.push(p);
        }
    }
    if pts.len() < n {
        return Err(Error::PackingInfeasible { requested: n, placed: pts.len(), separation: min_sep });
    }
    Ok(pts)
}

/// Cell and distractor positions drawn jointly so that every pair, of either
/// kind, respects the minimum separation.
pub fn generate_objects(spec: &SynthSpec) -> Result<(CoordSet, CoordSet)> {
    spec.validate()?;
    let n = spec.n_cells + spec.distractors.count;
    let mut rng = spec.rng(STREAM_CELLS);
    let pts = sample_separated(n, spec.extent_um(), spec.min_separation_um, &mut rng, |p| {
        !spec.cells_in_tissue || spec.in_tissue(p)
    })?;
    let cells = CoordSet::new(pts[..spec.n_cells].to_vec());
    let distractors = CoordSet::new(pts[spec.n_cells..].to_vec());
    Ok((cells, distractors))
}

pub fn generate_coords(spec: &SynthSpec) -> Result<CoordSet> {
    Ok(generate_objects(spec)?.0)
}

/// Noise SD field: `noise.sd` times a unit-peak Gaussian halo around every object.
pub fn noise_amplitude_field(objects: &[[f64; 3]], spec: &SynthSpec) -> Result<Volume3D> {
    let k = KernelSpec {
        sigma_um: spec.noise.halo_um,
        cutoff_um: 3.0 * spec.noise.halo_um,
        compounding: Compounding::Max,
        amplitude: Amplitude::UnitPeak,
    };
    let w = vec![spec.noise.sd; objects.len()];
    render_weighted(objects, Some(&w), &VoxelBox { lo: [0; 3], size: spec.shape }, spec.voxel_size_um, &k)
}

/// Amplitudes of cells (jittered) followed by distractors.
pub fn object_amplitudes(spec: &SynthSpec, n_cells: usize, n_distractors: usize) -> Vec<f64> {
    let mut rng = spec.rng(STREAM_AMPLITUDES);
    let j = spec.noise.amplitude_jitter;
    let [a, b] = spec.distractors.amplitude;
    let mut amps: Vec<f64> = (0..n_cells).map(|_| 1.0 - j * rng.random::<f64>()).collect();
    amps.extend((0..n_distractors).map(|_| a + (b - a) * rng.random::<f64>()));
    amps
}

/// Surrogate regressor. `dm = max(0, K(cells, distractors) + a * n1)`,
/// `aleatoric = a`, `epistemic = a * |n1 - n2| / sqrt(2)` with `a` the noise
/// field and `n1`, `n2` independent standard normal fields.
pub fn oracle_regress(cells: &CoordSet, distractors: &CoordSet, spec: &SynthSpec) -> Result<RegressorOutput> {
    spec.validate()?;
    let mut objects = cells.points.clone();
    objects.extend_from_slice(&distractors.points);
    let amps = object_amplitudes(spec, cells.len(), distractors.len());
    let window = VoxelBox { lo: [0; 3], size: spec.shape };
    let clean = render_weighted(&objects, Some(&amps), &window, spec.voxel_size_um, &spec.kernel)?;
    let field = noise_amplitude_field(&objects, spec)?;
    let [_, ny, nx] = spec.shape;
    let plane = ny * nx;
    let mut dm = clean.clone();
    let mut ep = Volume3D::zeros(spec.shape, spec.voxel_size_um)?;
    dm.data_mut().par_chunks_mut(plane).zip(ep.data_mut().par_chunks_mut(plane)).enumerate().for_each(
        |(z, (dslab, eslab))| {
            let mut rng = spec.rng(STREAM_NOISE + z as u64);
            for k in 0..plane {
                let n1: f64 = StandardNormal.sample(&mut rng);
                let n2: f64 = StandardNormal.sample(&mut rng);
                let a = field.data()[z * plane + k] as f64;
                if a > 0.0 {
                    dslab[k] = (dslab[k] as f64 + a * n1).max(0.0) as f32;
                    eslab[k] = (a * (n1 - n2).abs() / std::f64::consts::SQRT_2) as f32;
                }
            }
        },
    );
    RegressorOutput::new(dm, field, ep)
}

fn ellipsoid_mask(spec: &SynthSpec) -> Result<BinaryMask> {
    let vs = spec.voxel_size_um;
    BinaryMask::from_fn(MaskRole::Tissue, spec.shape, vs, |v| {
        spec.in_tissue(&voxel_center([v[0] as i64, v[1] as i64, v[2] as i64], vs))
    })
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [0, 1, 2].map(|_| StandardNormal.sample(&mut *rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return v.map(|c| c / n);
        }
    }
}

fn segment_dist2(p: &[f64; 3], a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let l2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if l2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / l2).clamp(0.0, 1.0) } else { 0.0 };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
    dist2(p, &q)
}

/// Random-walk tube centrelines, each a polyline inside the tissue ellipsoid.
pub fn tube_centerlines(spec: &SynthSpec) -> Vec<Vec<[f64; 3]>> {
    let s = &spec.structures;
    let mut rng = spec.rng(STREAM_TUBES);
    let extent = spec.extent_um();
    let steps = (s.length_um / s.step_um).ceil() as usize;
    (0..s.tubes)
        .map(|_| {
            let mut p = loop {
                let c = [0, 1, 2].map(|a| rng.random::<f64>() * extent[a]);
                if spec.in_tissue(&c) {
                    break c;
                }
            };
            let mut dir = random_unit(&mut rng);
            let mut line = vec![p];
            for _ in 0..steps {
                let mut moved = false;
                for attempt in 0..20 {
                    let jitter = random_unit(&mut rng);
                    let k = if attempt == 0 { 0.3 } else { 1.5 };
                    let mut d = [0, 1, 2].map(|a| dir[a] + k * jitter[a]);
                    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    d = d.map(|c| c / n);
                    let q = [0, 1, 2].map(|a| p[a] + s.step_um * d[a]);
                    if spec.in_tissue(&q) {
                        dir = d;
                        p = q;
                        moved = true;
                        break;
                    }
                }
                if !moved {
                    break;
                }
                line.push(p);
            }
            line
        })
        .collect()
}

/// Structure (tubes) and tissue (ellipsoid) masks; the structure is clipped to
/// the tissue.
pub fn generate_structures(spec: &SynthSpec) -> Result<(BinaryMask, BinaryMask)> {
    spec.validate()?;
    let tissue = ellipsoid_mask(spec)?;
    let vs = spec.voxel_size_um;
    let mut structure = Volume3D::filled(spec.shape, vs, 0u8)?;
    let r = spec.structures.radius_um;
    for line in tube_centerlines(spec) {
        let segs: Vec<([f64; 3], [f64; 3])> =
            if line.len() == 1 { vec![(line[0], line[0])] } else { line.windows(2).map(|w| (w[0], w[1])).collect() };
        for (a, b) in segs {
            let lo = [0, 1, 2].map(|ax| ((a[ax].min(b[ax]) - r) / vs[ax] - 0.5).floor().max(0.0) as usize);
            let hi = [0, 1, 2]
                .map(|ax| (((a[ax].max(b[ax]) + r) / vs[ax] - 0.5).ceil().max(0.0) as usize).min(spec.shape[ax] - 1));
            for z in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for x in lo[2]..=hi[2] {
                        let c = voxel_center([z as i64, y as i64, x as i64], vs);
                        let i = structure.index(z, y, x);
                        if segment_dist2(&c, &a, &b) <= r * r && tissue.is_set(i) {
                            structure.data_mut()[i] = 1;
                        }
                    }
                }
            }
        }
    }
    Ok((BinaryMask::new(MaskRole::Structure, structure)?, tissue))
}

/// `n` distinct voxel centers drawn uniformly from the voxels where `accept`
/// holds.
pub fn sample_voxel_centers(
    shape: [usize; 3],
    voxel_size: [f64; 3],
    n: usize,
    rng: &mut ChaCha8Rng,
    accept: impl Fn(usize) -> bool,
) -> Result<CoordSet> {
    let total: usize = shape.iter().product();
    let pool: Vec<usize> = (0..total).filter(|&i| accept(i)).collect();
    if pool.len() < n {
        return Err(Error::PackingInfeasible { requested: n, placed: pool.len(), separation: 0.0 });
    }
    let picked = rand::seq::index::sample(rng, pool.len(), n);
    let plane = shape[1] * shape[2];
    Ok(CoordSet::new(
        picked
            .iter()
            .map(|k| {
                let i = pool[k];
                voxel_center(
                    [(i / plane) as i64, ((i / shape[2]) % shape[1]) as i64, (i % shape[2]) as i64],
                    voxel_size,
                )
            })
            .collect(),
    ))
}

/// Everything a synthetic run needs.
#[derive(Debug, Clone)]
pub struct Scene {
    pub cells: CoordSet,
    pub distractors: CoordSet,
    pub regressor: RegressorOutput,
    pub structure: BinaryMask,
    pub tissue: BinaryMask,
}

pub fn generate_scene(spec: &SynthSpec) -> Result<Scene> {
    let (cells, distractors) = generate_objects(spec)?;
    let regressor = oracle_regress(&cells, &distractors, spec)?;
    let (structure, tissue) = generate_structures(spec)?;
    Ok(Scene { cells, distractors, regressor, structure, tissue })
}
