//! Two-sample Kolmogorov-Smirnov and Wilcoxon signed-rank tests.

use serde::{Deserialize, Serialize};

use super::cdf::normal_cdf;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=200 {
        let jf = j as f64;
        let term = sign * (-2.0 * jf * jf * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 * sum.abs().max(1e-300) {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// `sup |F_a - F_b|` with the asymptotic two-sided p-value.
pub fn ks_2sample(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidConfig("KS test needs two non-empty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let en = (na * nb / (na + nb)).sqrt();
    let p = kolmogorov_q((en + 0.12 + 0.11 / en) * d);
    Ok(TestResult { statistic: d, p_value: p })
}

/// Average ranks (1-based) of `v`.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut k = 0;
    while k < order.len() {
        let mut e = k;
        while e + 1 < order.len() && v[order[e + 1]] == v[order[k]] {
            e += 1;
        }
        let r = (k + e) as f64 / 2.0 + 1.0;
        for &o in &order[k..=e] {
            ranks[o] = r;
        }
        k = e + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of the positive differences.
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub exact: bool,
}

pub const WILCOXON_EXACT_MAX_N: usize = 12;

/// Two-sided signed-rank test on paired differences; zeros are dropped.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<WilcoxonResult> {
    let d: Vec<f64> = diffs.iter().copied().filter(|&v| v != 0.0).collect();
    if d.is_empty() {
        return Err(Error::AllZeroDifferences);
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("differences must be finite".into()));
    }
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let nf = n as f64;
    let p = if n <= WILCOXON_EXACT_MAX_N {
        // null distribution over doubled ranks, which are integers
        let r2: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = r2.iter().sum();
        let mut counts = vec![0u64; total + 1];
        counts[0] = 1;
        for &r in &r2 {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let w2 = (2.0 * w).round() as usize;
        let all = (1u64 << n) as f64;
        let lower: u64 = counts[..=w2].iter().sum();
        let upper: u64 = counts[w2..].iter().sum();
        (2.0 * lower.min(upper) as f64 / all).min(1.0)
    } else {
        let mean = nf * (nf + 1.0) / 4.0;
        let mut ties = 0.0;
        let mut sorted = ranks.clone();
        sorted.sort_by(f64::total_cmp);
        let mut k = 0;
        while k < sorted.len() {
            let mut e = k;
            while e + 1 < sorted.len() && sorted[e + 1] == sorted[k] {
                e += 1;
            }
            let t = (e - k + 1) as f64;
            ties += t * t * t - t;
            k = e + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
        if var <= 0.0 {
            1.0
        } else {
            let z = (w - mean) / var.sqrt();
            (2.0 * normal_cdf(-z.abs())).min(1.0)
        }
    };
    Ok(WilcoxonResult { statistic: w, p_value: p, n, exact: n <= WILCOXON_EXACT_MAX_N })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct sweep: evaluate both step CDFs at every pooled sample.
    fn ks_sweep(a: &[f64], b: &[f64]) -> f64 {
        let f = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
        a.iter().chain(b).map(|&x| (f(a, x) - f(b, x)).abs()).fold(0.0, f64::max)
    }

    /// Two-sided p from all 2^n sign assignments, using doubled ranks.
    fn wilcoxon_enumeration(d: &[f64]) -> f64 {
        let d: Vec<f64> = d.iter().copied().filter(|&v| v != 0.0).collect();
        let n = d.len();
        let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
        let r2: Vec<i64> = abs
            .iter()
            .map(|a| {
                let less = abs.iter().filter(|&&b| b < *a).count() as i64;
                let eq = abs.iter().filter(|&&b| b == *a).count() as i64;
                2 * less + eq + 1
            })
            .collect();
        let total: i64 = r2.iter().sum();
        let w2: i64 = d.iter().zip(&r2).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
        let dev = (2 * w2 - total).abs();
        let mut hits = 0u64;
        for mask in 0u64..(1 << n) {
            let s: i64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| r2[i]).sum();
            if (2 * s - total).abs() >= dev {
                hits += 1;
            }
        }
        hits as f64 / (1u64 << n) as f64
    }

    #[test]
    fn ks_basics() {
        let a = [0.1, 0.5, 0.9];
        assert_eq!(ks_2sample(&a, &a).unwrap().statistic, 0.0);
        assert_eq!(ks_2sample(&a, &a).unwrap().p_value, 1.0);
        let r = ks_2sample(&a, &[2.0, 2.5, 3.0]).unwrap();
        assert_eq!(r.statistic, 1.0);
        assert!(r.p_value < 0.1);
    }

    #[test]
    fn ks_matches_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a: Vec<f64> = (0..rng.random_range(1..15)).map(|_| rng.random_range(0..6) as f64).collect();
            let b: Vec<f64> = (0..rng.random_range(1..15)).map(|_| rng.random_range(0..8) as f64 * 0.7).collect();
            assert_eq!(ks_2sample(&a, &b).unwrap().statistic, ks_sweep(&a, &b));
        }
    }

    #[test]
    fn wilcoxon_examples() {
        let r = wilcoxon_signed_rank(&[-1.0, 1.0, -2.0, 2.0]).unwrap();
        assert_eq!(r.p_value, 1.0);
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.statistic, 21.0);
        assert_eq!(r.p_value, 1.0 / 32.0);
        assert!(matches!(wilcoxon_signed_rank(&[0.0, 0.0]), Err(Error::AllZeroDifferences)));
    }

    #[test]
    fn wilcoxon_exact_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let n = rng.random_range(1..=8);
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(-4..=4) as f64 * 0.5).collect();
            if d.iter().all(|&v| v == 0.0) {
                continue;
            }
            let got = wilcoxon_signed_rank(&d).unwrap().p_value;
            assert!((got - wilcoxon_enumeration(&d)).abs() < 1e-15, "{d:?}");
        }
    }

    #[test]
    fn wilcoxon_normal_approximation_is_close_to_exact() {
        // distinct magnitudes 1..=30, so ranks are the integers and the exact
        // null is a subset-sum count over 2^30 sign patterns
        let n = 30;
        let mut counts = vec![0u64; n * (n + 1) / 2 + 1];
        counts[0] = 1;
        for r in 1..=n {
            for s in (r..counts.len()).rev() {
                counts[s] += counts[s - r];
            }
        }
        for neg in [vec![1, 2, 3], vec![4, 9, 13, 17], vec![2, 5, 8, 11, 14, 18, 20, 23, 26]] {
            let d: Vec<f64> = (1..=n).map(|i| if neg.contains(&i) { -(i as f64) } else { i as f64 }).collect();
            let r = wilcoxon_signed_rank(&d).unwrap();
            assert!(!r.exact);
            let w = r.statistic as usize;
            let lower: u64 = counts[..=w].iter().sum();
            let upper: u64 = counts[w..].iter().sum();
            let exact = (2.0 * lower.min(upper) as f64 / (1u64 << n) as f64).min(1.0);
            assert!((r.p_value - exact).abs() < 0.01, "{} vs {exact}", r.p_value);
        }
    }
}
