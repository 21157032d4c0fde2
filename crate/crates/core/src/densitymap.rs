//! Ground-truth density maps: a Gaussian kernel per annotated cell, truncated
//! at a cutoff radius and compounded either by summation or by maximum.
//!
//! Two amplitude conventions are supported. `Normalized` uses the normalized 1-D
//! Gaussian `1 / (sigma * sqrt(2 pi)) * exp(-s^2 / 2 sigma^2)`, whose peak is
//! below 0.4 for any sigma >= 1 um. `UnitPeak` drops the normalization so every
//! isolated cell peaks at 1.0; the synthetic pipeline uses it so that density
//! thresholds and classifier features live on a fixed scale.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coords::CoordSet;
use crate::error::{Error, Result};
use crate::volume::{Volume3D, VoxelBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Compounding {
    #[serde(rename = "K_sum")]
    Sum,
    #[serde(rename = "K_max")]
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Amplitude {
    Normalized,
    UnitPeak,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub sigma_um: f64,
    pub cutoff_um: f64,
    pub compounding: Compounding,
    pub amplitude: Amplitude,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec { sigma_um: 2.0, cutoff_um: 16.0, compounding: Compounding::Max, amplitude: Amplitude::UnitPeak }
    }
}

impl KernelSpec {
    pub fn new(sigma_um: f64, compounding: Compounding) -> Self {
        KernelSpec { sigma_um, compounding, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_um > 0.0) || !(self.cutoff_um > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "kernel needs sigma > 0 and cutoff > 0 (got {}, {})",
                self.sigma_um, self.cutoff_um
            )));
        }
        Ok(())
    }

    pub fn peak_value(&self) -> f64 {
        gaussian_value(0.0, self.sigma_um, self.amplitude)
    }
}

pub fn gaussian_value(s: f64, sigma: f64, amplitude: Amplitude) -> f64 {
    let e = (-(s * s) / (2.0 * sigma * sigma)).exp();
    match amplitude {
        Amplitude::Normalized => e / (sigma * (2.0 * std::f64::consts::PI).sqrt()),
        Amplitude::UnitPeak => e,
    }
}

/// Renders a density map over the whole `shape` grid.
pub fn render_dm(coords: &CoordSet, shape: [usize; 3], voxel_size: [f64; 3], k: &KernelSpec) -> Result<Volume3D> {
    let window = VoxelBox { lo: [0; 3], size: shape };
    render_dm_window(coords, &window, voxel_size, k)
}

/// Renders the part of the global density map covered by `window` (global
/// voxel indices, may extend outside the volume). Stitching windows rendered
/// this way reproduces [`render_dm`] bit for bit.
pub fn render_dm_window(
    coords: &CoordSet,
    window: &VoxelBox,
    voxel_size: [f64; 3],
    k: &KernelSpec,
) -> Result<Volume3D> {
    render_weighted(&coords.points, None, window, voxel_size, k)
}

/// Like [`render_dm_window`] with a per-point amplitude multiplier.
pub(crate) fn render_weighted(
    points: &[[f64; 3]],
    weights: Option<&[f64]>,
    window: &VoxelBox,
    voxel_size: [f64; 3],
    k: &KernelSpec,
) -> Result<Volume3D> {
    k.validate()?;
    let mut items: Vec<([f64; 3], f64)> =
        points.iter().enumerate().map(|(i, p)| (*p, weights.map_or(1.0, |w| w[i]))).collect();
    // canonical order keeps K_sum accumulation independent of input order
    items.sort_by(|a, b| {
        for ax in 0..3 {
            match a.0[ax].total_cmp(&b.0[ax]) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        a.1.total_cmp(&b.1)
    });
    let zs: Vec<f64> = items.iter().map(|it| it.0[0]).collect();

    let [nz, ny, nx] = window.size;
    let plane = ny * nx;
    let cutoff = k.cutoff_um;
    let cutoff2 = cutoff * cutoff;
    let inv2s2 = 1.0 / (2.0 * k.sigma_um * k.sigma_um);
    let amp = k.peak_value();
    let lo = window.lo;

    // voxel index range whose centers lie within `r` of `c` along one axis
    let span = |c: f64, r: f64, axis: usize, n: usize| -> (usize, usize) {
        let s = voxel_size[axis];
        let a = ((c - r) / s - 0.5).ceil() as i64 - lo[axis];
        let b = ((c + r) / s - 0.5).floor() as i64 - lo[axis];
        let a = a.max(0);
        let b = b.min(n as i64 - 1);
        if a > b {
            (1, 0)
        } else {
            (a as usize, b as usize)
        }
    };

    let mut data = vec![0f32; nz * plane];
    data.par_chunks_mut(plane).enumerate().for_each(|(z, slab)| {
        let cz = ((lo[0] + z as i64) as f64 + 0.5) * voxel_size[0];
        let first = zs.partition_point(|&v| v < cz - cutoff);
        let last = zs.partition_point(|&v| v <= cz + cutoff);
        if first >= last {
            return;
        }
        let mut acc = vec![0f64; plane];
        for (p, w) in &items[first..last] {
            let dz = cz - p[0];
            let rem = cutoff2 - dz * dz;
            if rem < 0.0 {
                continue;
            }
            let r = rem.sqrt();
            let (y0, y1) = span(p[1], r, 1, ny);
            let (x0, x1) = span(p[2], r, 2, nx);
            if y0 > y1 || x0 > x1 {
                continue;
            }
            for y in y0..=y1 {
                let cy = ((lo[1] + y as i64) as f64 + 0.5) * voxel_size[1];
                let dy = cy - p[1];
                let row = y * nx;
                for x in x0..=x1 {
                    let cx = ((lo[2] + x as i64) as f64 + 0.5) * voxel_size[2];
                    let dx = cx - p[2];
                    let d2 = dz * dz + dy * dy + dx * dx;
                    if d2 > cutoff2 {
                        continue;
                    }
                    let g = w * amp * (-d2 * inv2s2).exp();
                    let cell = &mut acc[row + x];
                    match k.compounding {
                        Compounding::Sum => *cell += g,
                        Compounding::Max => {
                            if g > *cell {
                                *cell = g
                            }
                        }
                    }
                }
            }
        }
        for (o, a) in slab.iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    });
    Volume3D::from_vec(window.size, voxel_size, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coords::dist;
    use crate::volume::voxel_center;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Naive all-pairs evaluation used as the reference renderer.
    fn brute_render(coords: &[[f64; 3]], shape: [usize; 3], vs: [f64; 3], k: &KernelSpec) -> Vec<f64> {
        let mut out = Vec::new();
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    let c = voxel_center([z as i64, y as i64, x as i64], vs);
                    let vals: Vec<f64> = coords
                        .iter()
                        .map(|p| dist(&c, p))
                        .filter(|&d| d <= k.cutoff_um)
                        .map(|d| gaussian_value(d, k.sigma_um, k.amplitude))
                        .collect();
                    out.push(match k.compounding {
                        Compounding::Sum => vals.iter().sum(),
                        Compounding::Max => vals.iter().cloned().fold(0.0, f64::max),
                    });
                }
            }
        }
        out
    }

    #[test]
    fn gaussian_closed_forms() {
        assert!((gaussian_value(0.0, 2.0, Amplitude::Normalized) - 0.199_471_140_200_716_35).abs() < 1e-15);
        assert_eq!(gaussian_value(0.0, 3.7, Amplitude::UnitPeak), 1.0);
        assert!((gaussian_value(1.5, 1.5, Amplitude::UnitPeak) - 0.606_530_659_712_633_4).abs() < 1e-15);
    }

    #[test]
    fn gaussian_monotone_in_distance() {
        let mut prev = f64::INFINITY;
        for i in 0..200 {
            let v = gaussian_value(i as f64 * 0.1, 2.5, Amplitude::Normalized);
            assert!(v <= prev);
            assert_eq!(v, gaussian_value(-(i as f64) * 0.1, 2.5, Amplitude::Normalized));
            prev = v;
        }
    }

    #[test]
    fn empty_coords_render_zero() {
        let v = render_dm(&CoordSet::default(), [4, 5, 6], [1.0; 3], &KernelSpec::default()).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_cell_sum_equals_max() {
        let c = CoordSet::new(vec![[5.2, 4.9, 6.1]]);
        let a = render_dm(&c, [12, 12, 12], [1.0; 3], &KernelSpec::new(2.0, Compounding::Sum)).unwrap();
        let b = render_dm(&c, [12, 12, 12], [1.0; 3], &KernelSpec::new(2.0, Compounding::Max)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let shape = [rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=16)];
            let vs = [rng.random_range(0.5..1.5), rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)];
            let n = rng.random_range(0..=5);
            let pts: Vec<[f64; 3]> =
                (0..n).map(|_| [0, 1, 2].map(|a| rng.random_range(-2.0..shape[a] as f64 * vs[a] + 2.0))).collect();
            let k = KernelSpec {
                sigma_um: rng.random_range(0.8..3.0),
                cutoff_um: rng.random_range(2.0..8.0),
                compounding: if trial % 2 == 0 { Compounding::Sum } else { Compounding::Max },
                amplitude: if trial % 3 == 0 { Amplitude::Normalized } else { Amplitude::UnitPeak },
            };
            let v = render_dm(&CoordSet::new(pts.clone()), shape, vs, &k).unwrap();
            let r = brute_render(&pts, shape, vs, &k);
            for (a, b) in v.data().iter().zip(&r) {
                assert!((*a as f64 - b).abs() < 1e-6, "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn permutation_invariant_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts: Vec<[f64; 3]> = (0..40).map(|_| [0, 1, 2].map(|_| rng.random_range(0.0..20.0))).collect();
        for comp in [Compounding::Sum, Compounding::Max] {
            let k = KernelSpec::new(2.5, comp);
            let a = render_dm(&CoordSet::new(pts.clone()), [20, 20, 20], [1.0; 3], &k).unwrap();
            pts.shuffle(&mut rng);
            let b = render_dm(&CoordSet::new(pts.clone()), [20, 20, 20], [1.0; 3], &k).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn max_is_bounded_sum_is_not() {
        let pts = vec![[5.5, 5.5, 5.5], [5.5, 5.5, 5.5], [5.5, 5.5, 8.5]];
        for amp in [Amplitude::Normalized, Amplitude::UnitPeak] {
            let mut k = KernelSpec::new(2.0, Compounding::Max);
            k.amplitude = amp;
            let g0 = k.peak_value() as f32;
            let m = render_dm(&CoordSet::new(pts.clone()), [12, 12, 12], [1.0; 3], &k).unwrap();
            assert!(m.max_value() <= g0);
            k.compounding = Compounding::Sum;
            let s = render_dm(&CoordSet::new(pts[..2].to_vec()), [12, 12, 12], [1.0; 3], &k).unwrap();
            assert!((s.get(5, 5, 5) - 2.0 * g0).abs() < 1e-6);
        }
    }

    #[test]
    fn windows_stitch_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<[f64; 3]> = (0..30).map(|_| [0, 1, 2].map(|_| rng.random_range(0.0..24.0))).collect();
        let c = CoordSet::new(pts);
        let vs = [0.7, 1.0, 1.3];
        let k = KernelSpec { sigma_um: 2.0, cutoff_um: 6.0, ..KernelSpec::new(2.0, Compounding::Sum) };
        let full = render_dm(&c, [24, 24, 24], vs, &k).unwrap();
        let w = VoxelBox { lo: [5, 10, 3], size: [7, 9, 11] };
        let part = render_dm_window(&c, &w, vs, &k).unwrap();
        assert_eq!(part.data(), full.crop(&w, 0.0).data());
    }
}
