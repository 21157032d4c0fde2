//! Non-maximum suppression on density maps.
//!
//! Candidates are voxels that are >= all of their in-bounds 26 neighbours and
//! strictly above both the threshold and zero. They are visited in descending
//! value order (ties by ascending `(z, y, x)`); a candidate is accepted unless an
//! already accepted peak lies closer than `min_distance_um`. A threshold of zero
//! turns the detector into a proposal generator.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coords::{dist2, CoordSet};
use crate::error::{Error, Result};
use crate::volume::Volume3D;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    pub min_distance_um: f64,
    pub threshold: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig { min_distance_um: 4.0, threshold: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub voxel: [usize; 3],
    pub value: f32,
}

fn is_local_max(dm: &Volume3D, z: usize, y: usize, x: usize, v: f32) -> bool {
    let [nz, ny, nx] = dm.shape();
    for zz in z.saturating_sub(1)..=(z + 1).min(nz - 1) {
        for yy in y.saturating_sub(1)..=(y + 1).min(ny - 1) {
            for xx in x.saturating_sub(1)..=(x + 1).min(nx - 1) {
                if dm.get(zz, yy, xx) > v {
                    return false;
                }
            }
        }
    }
    true
}

/// All local-maximum candidates above `threshold`, in visiting order.
pub fn candidates(dm: &Volume3D, threshold: f64) -> Result<Vec<Peak>> {
    if dm.data().par_iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("density map contains non-finite values".into()));
    }
    let [_, ny, nx] = dm.shape();
    let plane = ny * nx;
    let mut cands: Vec<Peak> = dm
        .data()
        .par_chunks(plane)
        .enumerate()
        .flat_map_iter(|(z, slab)| {
            let mut found = Vec::new();
            for y in 0..ny {
                for x in 0..nx {
                    let v = slab[y * nx + x];
                    if v > 0.0 && (v as f64) > threshold && is_local_max(dm, z, y, x, v) {
                        found.push(Peak { voxel: [z, y, x], value: v });
                    }
                }
            }
            found
        })
        .collect();
    cands.sort_by(|a, b| match b.value.total_cmp(&a.value) {
        Ordering::Equal => a.voxel.cmp(&b.voxel),
        o => o,
    });
    Ok(cands)
}

pub fn detect_peak_voxels(dm: &Volume3D, cfg: &NmsConfig) -> Result<Vec<Peak>> {
    if !(cfg.min_distance_um > 0.0) {
        return Err(Error::InvalidConfig("NMS min_distance must be > 0".into()));
    }
    if !(cfg.threshold >= 0.0) {
        return Err(Error::InvalidConfig("NMS threshold must be >= 0".into()));
    }
    let cands = candidates(dm, cfg.threshold)?;
    let r = cfg.min_distance_um;
    let r2 = r * r;
    let bucket = |p: &[f64; 3]| -> [i64; 3] { p.map(|v| (v / r).floor() as i64) };
    let mut grid: HashMap<[i64; 3], Vec<[f64; 3]>> = HashMap::new();
    let mut out = Vec::new();
    for c in cands {
        let pos = dm.voxel_center(c.voxel);
        let b = bucket(&pos);
        let mut suppressed = false;
        'search: for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(list) = grid.get(&[b[0] + dz, b[1] + dy, b[2] + dx]) {
                        if list.iter().any(|q| dist2(q, &pos) < r2) {
                            suppressed = true;
                            break 'search;
                        }
                    }
                }
            }
        }
        if !suppressed {
            grid.entry(b).or_default().push(pos);
            out.push(c);
        }
    }
    Ok(out)
}

/// Peak coordinates (voxel centers, micrometers) with their density values.
pub fn detect_peaks(dm: &Volume3D, cfg: &NmsConfig) -> Result<CoordSet> {
    let peaks = detect_peak_voxels(dm, cfg)?;
    Ok(CoordSet {
        points: peaks.iter().map(|p| dm.voxel_center(p.voxel)).collect(),
        p: None,
        dm_value: Some(peaks.iter().map(|p| p.value as f64).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coords::dist;
    use crate::densitymap::{render_dm, Compounding, KernelSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Quadratic reference: scan every voxel, check its neighbourhood
    /// directly, then suppress greedily against the full accepted list.
    fn naive_nms(dm: &Volume3D, cfg: &NmsConfig) -> Vec<[usize; 3]> {
        let [nz, ny, nx] = dm.shape();
        let mut c = Vec::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let v = dm.get(z, y, x);
                    if !(v > 0.0 && v as f64 > cfg.threshold) {
                        continue;
                    }
                    let mut ok = true;
                    for zz in 0..nz {
                        for yy in 0..ny {
                            for xx in 0..nx {
                                let near = (zz as i64 - z as i64).abs() <= 1
                                    && (yy as i64 - y as i64).abs() <= 1
                                    && (xx as i64 - x as i64).abs() <= 1;
                                if near && dm.get(zz, yy, xx) > v {
                                    ok = false;
                                }
                            }
                        }
                    }
                    if ok {
                        c.push(([z, y, x], v));
                    }
                }
            }
        }
        c.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut acc: Vec<[usize; 3]> = Vec::new();
        for (v, _) in c {
            let p = dm.voxel_center(v);
            if acc.iter().all(|q| dist(&dm.voxel_center(*q), &p) >= cfg.min_distance_um) {
                acc.push(v);
            }
        }
        acc
    }

    fn random_dm(rng: &mut ChaCha8Rng, n: usize, quantize: bool) -> Volume3D {
        let shape = [rng.random_range(1..=n), rng.random_range(1..=n), rng.random_range(1..=n)];
        let data = (0..shape.iter().product::<usize>())
            .map(|_| {
                let v: f32 = rng.random_range(-0.5..1.0);
                if quantize {
                    (v * 4.0).round() / 4.0
                } else {
                    v
                }
            })
            .collect();
        Volume3D::from_vec(shape, [1.0, 0.8, 1.2], data).unwrap()
    }

    #[test]
    fn single_kernel_single_peak() {
        let c = CoordSet::new(vec![[6.5, 7.5, 5.5]]);
        let dm = render_dm(&c, [14, 14, 14], [1.0; 3], &KernelSpec::new(2.0, Compounding::Max)).unwrap();
        let p = detect_peaks(&dm, &NmsConfig::default()).unwrap();
        assert_eq!(p.points, vec![[6.5, 7.5, 5.5]]);
        assert_eq!(p.dm_value.unwrap(), vec![1.0]);
    }

    #[test]
    fn close_kernels_merge_into_one_detection() {
        let c = CoordSet::new(vec![[8.5, 8.5, 6.5], [8.5, 8.5, 9.5]]);
        let dm = render_dm(&c, [18, 18, 18], [1.0; 3], &KernelSpec::new(2.0, Compounding::Max)).unwrap();
        let cfg = NmsConfig::default();
        let p = detect_peaks(&dm, &cfg).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(naive_nms(&dm, &cfg).len(), 1);
    }

    #[test]
    fn zero_map_has_no_peaks() {
        let dm = Volume3D::zeros([5, 5, 5], [1.0; 3]).unwrap();
        assert!(detect_peaks(&dm, &NmsConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn plateau_reports_smallest_voxel() {
        let mut dm = Volume3D::zeros([3, 3, 3], [1.0; 3]).unwrap();
        dm.set(1, 1, 1, 2.0);
        dm.set(1, 1, 2, 2.0);
        let p = detect_peak_voxels(&dm, &NmsConfig::default()).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].voxel, [1, 1, 1]);
    }

    #[test]
    fn non_finite_rejected() {
        let mut dm = Volume3D::zeros([2, 2, 2], [1.0; 3]).unwrap();
        dm.set(0, 0, 0, f32::NAN);
        assert!(detect_peaks(&dm, &NmsConfig::default()).is_err());
    }

    #[test]
    fn equals_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..40 {
            let dm = random_dm(&mut rng, if trial < 30 { 12 } else { 24 }, trial % 2 == 0);
            let cfg = NmsConfig {
                min_distance_um: rng.random_range(1.0..5.0),
                threshold: if trial % 3 == 0 { 0.0 } else { rng.random_range(0.0..0.6) },
            };
            let got: Vec<[usize; 3]> = detect_peak_voxels(&dm, &cfg).unwrap().iter().map(|p| p.voxel).collect();
            assert_eq!(got, naive_nms(&dm, &cfg), "trial {trial}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn min_distance_and_threshold_monotone(seed in any::<u64>(), t1 in 0.0f64..0.5, dt in 0.0f64..0.5, r in 1.0f64..6.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dm = random_dm(&mut rng, 14, seed % 2 == 0);
            let lo = detect_peaks(&dm, &NmsConfig { min_distance_um: r, threshold: t1 }).unwrap();
            let hi = detect_peaks(&dm, &NmsConfig { min_distance_um: r, threshold: t1 + dt }).unwrap();
            if let Some(d) = lo.min_pairwise_distance() {
                prop_assert!(d >= r);
            }
            prop_assert!(lo.dm_value.as_ref().unwrap().iter().all(|&v| v > t1));
            prop_assert!(hi.len() <= lo.len());
            for p in &hi.points {
                prop_assert!(lo.points.contains(p));
            }
        }
    }
}
