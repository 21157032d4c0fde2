//! Empirical and Gaussian-kernel CDFs evaluated on a shared distance grid.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdfMode {
    /// Gaussian kernels with Scott's bandwidth.
    Kde,
    /// Raw step function.
    Empirical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCdf {
    sorted: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(mut samples: Vec<f64>) -> Self {
        samples.sort_by(f64::total_cmp);
        EmpiricalCdf { sorted: samples }
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.sorted
    }

    /// Fraction of samples `<= x`.
    pub fn eval(&self, x: f64) -> f64 {
        self.sorted.partition_point(|&s| s <= x) as f64 / self.sorted.len() as f64
    }

    pub fn eval_grid(&self, grid: &[f64]) -> Vec<f64> {
        grid.iter().map(|&x| self.eval(x)).collect()
    }

    /// Fraction of samples strictly below `x`.
    pub fn fraction_below(&self, x: f64) -> f64 {
        self.sorted.partition_point(|&s| s < x) as f64 / self.sorted.len() as f64
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Population SD times `n^(-1/5)`.
pub fn scott_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    if samples.len() < 2 {
        return 0.0;
    }
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    sd * n.powf(-0.2)
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Mean of Gaussian CDFs centred on the samples. Falls back to the empirical
/// CDF when the bandwidth is zero (fewer than two distinct values).
pub fn kde_cdf(samples: &[f64], grid: &[f64]) -> Vec<f64> {
    let h = scott_bandwidth(samples);
    if !(h > 0.0) {
        return EmpiricalCdf::new(samples.to_vec()).eval_grid(grid);
    }
    let n = samples.len() as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    grid.iter()
        .map(|&x| {
            // kernels farther than 9h contribute exactly 0 or 1 in f64
            let lo = sorted.partition_point(|&s| s < x - 9.0 * h);
            let hi = sorted.partition_point(|&s| s <= x + 9.0 * h);
            let mid: f64 = sorted[lo..hi].iter().map(|&s| normal_cdf((x - s) / h)).sum();
            ((lo as f64 + mid) / n).clamp(0.0, 1.0)
        })
        .collect()
}

pub fn cdf_on_grid(samples: &[f64], grid: &[f64], mode: CdfMode) -> Vec<f64> {
    match mode {
        CdfMode::Kde => kde_cdf(samples, grid),
        CdfMode::Empirical => EmpiricalCdf::new(samples.to_vec()).eval_grid(grid),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empirical_steps() {
        let c = EmpiricalCdf::new(vec![3.0, 1.0, 2.0, 2.0]);
        assert_eq!(c.eval(0.5), 0.0);
        assert_eq!(c.eval(1.0), 0.25);
        assert_eq!(c.eval(2.0), 0.75);
        assert_eq!(c.eval(9.0), 1.0);
        assert_eq!(c.fraction_below(2.0), 0.25);
    }

    #[test]
    fn kde_matches_direct_sum() {
        let s = [0.3, 1.7, 2.2, 2.9, 5.0, 5.1];
        let grid = linspace(-2.0, 8.0, 41);
        let h = scott_bandwidth(&s);
        let got = kde_cdf(&s, &grid);
        for (g, x) in got.iter().zip(&grid) {
            let direct: f64 = s.iter().map(|&si| normal_cdf((x - si) / h)).sum::<f64>() / s.len() as f64;
            assert!((g - direct).abs() < 1e-12);
        }
        assert!(got.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn scott_rule() {
        let s = [1.0, 3.0];
        assert!((scott_bandwidth(&s) - 2f64.powf(-0.2)).abs() < 1e-15);
        assert_eq!(kde_cdf(&[2.0, 2.0], &[1.0, 2.0, 3.0]), vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn normal_cdf_values() {
        assert_eq!(normal_cdf(0.0), 0.5);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-12);
    }
}
