//! Summary-statistic feature vectors around cell proposals.
//!
//! For every map and every window side, a cube centered on the proposal is
//! clipped to the volume and reduced to 14 numbers: five percentiles spread
//! uniformly over [1, 99], the fraction of voxels strictly above five thresholds
//! spread uniformly over a per-map range, and mean, SD, skewness and kurtosis.
//!
//! Column order is map-major, window-minor, statistic-innermost, so the column
//! of statistic `s` for map `m` and window `w` is
//! `(m * n_windows + w) * 14 + s`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coords::CoordSet;
use crate::error::{Error, Result};
use crate::volume::Volume3D;

pub const STATS_PER_WINDOW: usize = 14;
const STAT_NAMES: [&str; STATS_PER_WINDOW] =
    ["p0", "p1", "p2", "p3", "p4", "r0", "r1", "r2", "r3", "r4", "mean", "sd", "skew", "kurt"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Dm,
    Aleatoric,
    Epistemic,
}

impl MapKind {
    pub fn name(self) -> &'static str {
        match self {
            MapKind::Dm => "dm",
            MapKind::Aleatoric => "aleatoric",
            MapKind::Epistemic => "epistemic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub window_sides_um: Vec<f64>,
    /// Lowest and highest percentile; `percentile_count` values in between.
    pub percentile_range: [f64; 2],
    pub percentile_count: usize,
    pub threshold_count: usize,
    /// Endpoints of the threshold ranges; values are spread uniformly from
    /// the first to the second endpoint.
    pub dm_thresholds: [f64; 2],
    pub aleatoric_thresholds: [f64; 2],
    pub epistemic_thresholds: [f64; 2],
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            window_sides_um: vec![4.0, 8.0, 16.0, 32.0],
            percentile_range: [1.0, 99.0],
            percentile_count: 5,
            threshold_count: 5,
            dm_thresholds: [1.0, 1.5],
            aleatoric_thresholds: [1.0, 10.0],
            // descending range, same value set as [0.2, 1]
            epistemic_thresholds: [1.0, 0.2],
        }
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window_sides_um.is_empty()
            || self.window_sides_um.iter().any(|&s| !(s > 0.0))
            || self.window_sides_um.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::InvalidConfig("window sides must be positive and sorted ascending".into()));
        }
        if self.percentile_count != 5 || self.threshold_count != 5 {
            return Err(Error::InvalidConfig("5 percentiles and 5 thresholds per window".into()));
        }
        Ok(())
    }

    pub fn percentiles(&self) -> Vec<f64> {
        linspace(self.percentile_range[0], self.percentile_range[1], self.percentile_count)
    }

    pub fn thresholds(&self, kind: MapKind) -> Vec<f64> {
        let r = match kind {
            MapKind::Dm => self.dm_thresholds,
            MapKind::Aleatoric => self.aleatoric_thresholds,
            MapKind::Epistemic => self.epistemic_thresholds,
        };
        linspace(r[0], r[1], self.threshold_count)
    }

    pub fn dimension(&self, n_maps: usize) -> usize {
        n_maps * self.window_sides_um.len() * STATS_PER_WINDOW
    }

    pub fn column_names(&self, maps: &[MapKind]) -> Vec<String> {
        let mut out = Vec::new();
        for m in maps {
            for w in &self.window_sides_um {
                for s in STAT_NAMES {
                    out.push(format!("{}_w{}_{}", m.name(), w, s));
                }
            }
        }
        out
    }
}

/// Row-major feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        FeatureMatrix { rows, cols, data }
    }

    pub fn empty(cols: usize) -> Self {
        FeatureMatrix { rows: 0, cols, data: Vec::new() }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix::new(idx.len(), self.cols, data)
    }

    pub fn vstack(&mut self, other: &FeatureMatrix) {
        assert_eq!(self.cols, other.cols);
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
    }

    pub fn write_csv<W: Write>(&self, names: &[String], w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(names)?;
        for i in 0..self.rows {
            wr.write_record(self.row(i).iter().map(|v| v.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Linear interpolation between order statistics of a sorted sample.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = q / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Mean, SD, skewness and (non-excess) kurtosis; the last two are 0 when SD is 0.
pub fn four_moments(values: &[f64]) -> [f64; 4] {
    if values.iter().all(|&v| v == values[0]) {
        return [values[0], 0.0, 0.0, 0.0];
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in values {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let sd = m2.sqrt();
    if m2 == 0.0 {
        return [mean, 0.0, 0.0, 0.0];
    }
    [mean, sd, m3 / (m2 * sd), m4 / (m2 * m2)]
}

/// Window `[lo, lo + side)` in voxels along one axis, clipped to `[0, n)`.
fn window_axis(pos: f64, voxel: f64, side_um: f64, n: usize) -> (usize, usize) {
    let side = ((side_um / voxel).round() as i64).max(1);
    let c = (pos / voxel).floor() as i64;
    let lo = c - side / 2;
    let hi = lo + side;
    (lo.clamp(0, n as i64) as usize, hi.clamp(0, n as i64) as usize)
}

fn window_stats(buf: &mut [f64], percentiles: &[f64], thresholds: &[f64], out: &mut [f64]) {
    let mom = four_moments(buf);
    buf.sort_unstable_by(f64::total_cmp);
    for (k, q) in percentiles.iter().enumerate() {
        out[k] = percentile_sorted(buf, *q);
    }
    let n = buf.len() as f64;
    for (k, t) in thresholds.iter().enumerate() {
        let above = buf.len() - buf.partition_point(|&v| v <= *t);
        out[5 + k] = above as f64 / n;
    }
    out[10..14].copy_from_slice(&mom);
}

/// Features for every proposal, one row per proposal in input order.
pub fn extract_features(
    maps: &[(MapKind, &Volume3D)],
    proposals: &CoordSet,
    spec: &FeatureSpec,
) -> Result<FeatureMatrix> {
    spec.validate()?;
    let Some((_, first)) = maps.first() else {
        return Err(Error::InvalidConfig("no maps supplied for feature extraction".into()));
    };
    for (_, m) in maps {
        if !m.same_grid(first) {
            return Err(Error::ShapeMismatch(first.shape(), m.shape()));
        }
    }
    let cols = spec.dimension(maps.len());
    let shape = first.shape();
    let vs = first.voxel_size();
    let percentiles = spec.percentiles();
    let thresholds: Vec<Vec<f64>> = maps.iter().map(|(k, _)| spec.thresholds(*k)).collect();
    let rows: Vec<Result<Vec<f64>>> = proposals
        .points
        .par_iter()
        .enumerate()
        .map(|(i, pos)| {
            let mut row = vec![0.0; cols];
            let mut buf = Vec::new();
            for (mi, (_, map)) in maps.iter().enumerate() {
                for (wi, side) in spec.window_sides_um.iter().enumerate() {
                    let r = [0, 1, 2].map(|a| window_axis(pos[a], vs[a], *side, shape[a]));
                    buf.clear();
                    for z in r[0].0..r[0].1 {
                        for y in r[1].0..r[1].1 {
                            let base = map.index(z, y, 0);
                            buf.extend(map.data()[base + r[2].0..base + r[2].1].iter().map(|&v| v as f64));
                        }
                    }
                    if buf.is_empty() {
                        return Err(Error::EmptyWindow { index: i });
                    }
                    let off = (mi * spec.window_sides_um.len() + wi) * STATS_PER_WINDOW;
                    window_stats(&mut buf, &percentiles, &thresholds[mi], &mut row[off..off + STATS_PER_WINDOW]);
                }
            }
            Ok(row)
        })
        .collect();
    let mut data = Vec::with_capacity(proposals.len() * cols);
    for r in rows {
        data.extend(r?);
    }
    Ok(FeatureMatrix::new(proposals.len(), cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vol(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> Volume3D {
        let data = (0..shape.iter().product::<usize>()).map(|_| rng.random_range(0.0..2.0)).collect();
        Volume3D::from_vec(shape, [1.0; 3], data).unwrap()
    }

    #[test]
    fn dimensions() {
        let spec = FeatureSpec::default();
        assert_eq!(spec.dimension(3), 168);
        assert_eq!(spec.dimension(1), 56);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_vol(&mut rng, [20, 20, 20]);
        let m = extract_features(&[(MapKind::Dm, &v)], &CoordSet::new(vec![[10.5, 10.5, 10.5]]), &spec).unwrap();
        assert_eq!(m.cols, 56);
        assert_eq!(spec.column_names(&[MapKind::Dm, MapKind::Aleatoric, MapKind::Epistemic]).len(), 168);
    }

    #[test]
    fn constant_window() {
        let v = Volume3D::filled([10, 10, 10], [1.0; 3], 1.25f32).unwrap();
        let spec = FeatureSpec::default();
        let m = extract_features(&[(MapKind::Dm, &v)], &CoordSet::new(vec![[5.5, 5.5, 5.5]]), &spec).unwrap();
        for w in 0..4 {
            let r = &m.row(0)[w * 14..(w + 1) * 14];
            assert!(r[..5].iter().all(|&p| p == 1.25));
            // thresholds 1.0..1.5: 1.25 is above the first three only
            assert_eq!(&r[5..10], &[1.0, 1.0, 0.0, 0.0, 0.0]);
            assert_eq!(&r[10..], &[1.25, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn threshold_values() {
        let spec = FeatureSpec::default();
        assert_eq!(spec.thresholds(MapKind::Dm), vec![1.0, 1.125, 1.25, 1.375, 1.5]);
        assert_eq!(spec.thresholds(MapKind::Aleatoric), vec![1.0, 3.25, 5.5, 7.75, 10.0]);
        let e = spec.thresholds(MapKind::Epistemic);
        for (a, b) in e.iter().zip([1.0, 0.8, 0.6, 0.4, 0.2]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(spec.percentiles(), vec![1.0, 25.5, 50.0, 74.5, 99.0]);
    }

    #[test]
    fn percentile_interpolation() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile_sorted(&s, 50.0), 3.0);
        assert!((percentile_sorted(&s, 1.0) - 1.04).abs() < 1e-12);
        assert!((percentile_sorted(&s, 99.0) - 4.96).abs() < 1e-12);
    }

    #[test]
    fn moments_of_known_sample() {
        // {0, 0, 0, 4}: mean 1, var 3, third central 6, fourth central 57/... by hand
        let m = four_moments(&[0.0, 0.0, 0.0, 4.0]);
        assert_eq!(m[0], 1.0);
        assert!((m[1] - 3f64.sqrt()).abs() < 1e-12);
        // m3 = (3*(-1)^3 + 27)/4 = 6, m4 = (3 + 81)/4 = 21
        assert!((m[2] - 6.0 / 3f64.powf(1.5)).abs() < 1e-12);
        assert!((m[3] - 21.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn border_windows_are_clipped_not_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random_vol(&mut rng, [3, 3, 3]);
        let m = extract_features(&[(MapKind::Dm, &v)], &CoordSet::new(vec![[0.1, 0.1, 2.9]]), &FeatureSpec::default())
            .unwrap();
        assert!(m.data.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn mismatched_maps_rejected() {
        let a = Volume3D::zeros([4, 4, 4], [1.0; 3]).unwrap();
        let b = Volume3D::zeros([4, 4, 5], [1.0; 3]).unwrap();
        let r = extract_features(
            &[(MapKind::Dm, &a), (MapKind::Aleatoric, &b)],
            &CoordSet::new(vec![[1.0; 3]]),
            &FeatureSpec::default(),
        );
        assert!(matches!(r, Err(Error::ShapeMismatch(..))));
    }

    #[test]
    fn translation_equivariance_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let big = random_vol(&mut rng, [60, 60, 60]);
        let shift = [3usize, 5, 2];
        let shifted_data: Vec<f32> = (0..60 * 60 * 60)
            .map(|i| {
                let [z, y, x] = big.unravel(i);
                if z >= shift[0] && y >= shift[1] && x >= shift[2] {
                    big.get(z - shift[0], y - shift[1], x - shift[2])
                } else {
                    0.0
                }
            })
            .collect();
        let shifted = Volume3D::from_vec([60, 60, 60], [1.0; 3], shifted_data).unwrap();
        let p = [24.5, 22.5, 25.5];
        let q = [p[0] + 3.0, p[1] + 5.0, p[2] + 2.0];
        let spec = FeatureSpec::default();
        let a = extract_features(&[(MapKind::Dm, &big)], &CoordSet::new(vec![p]), &spec).unwrap();
        let b = extract_features(&[(MapKind::Dm, &shifted)], &CoordSet::new(vec![q]), &spec).unwrap();
        assert_eq!(a, b);
        for w in 0..4 {
            let r = &a.row(0)[w * 14..(w + 1) * 14];
            assert!(r[..5].windows(2).all(|x| x[0] <= x[1]));
            assert!(r[5..10].iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}
