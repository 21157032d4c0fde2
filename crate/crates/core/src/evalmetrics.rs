//! One-to-one matching of predictions to ground truth, detection metrics and
//! calibration scores.
//!
//! Matching minimizes the summed Euclidean distance over the full rectangular
//! distance matrix; pairs farther than `t_match` are then split into one FP
//! and one FN. Calibration scores every GT cell (target 1, probability of its
//! TP partner or 0) and every unmatched prediction (target 0, its own
//! probability), and normalizes by the number of terms.

use serde::{Deserialize, Serialize};

use crate::coords::{dist, CoordSet};
use crate::error::{Error, Result};

pub const DEFAULT_T_MATCH_UM: f64 = 4.0;
pub const NLL_EPSILON: f64 = 1e-7;

/// Minimum-cost assignment on a dense `rows x cols` row-major matrix.
/// Returns `min(rows, cols)` pairs `(row, col)` sorted by row.
pub fn linear_sum_assignment(cost: &[f64], rows: usize, cols: usize) -> Vec<(usize, usize)> {
    assert_eq!(cost.len(), rows * cols);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows > cols {
        let mut t = vec![0.0; cost.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = cost[r * cols + c];
            }
        }
        let mut pairs: Vec<(usize, usize)> =
            linear_sum_assignment(&t, cols, rows).into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        return pairs;
    }
    // shortest augmenting paths with row/column potentials, 1-based with a
    // virtual column 0
    let (n, m) = (rows, cols);
    let a = |i: usize, j: usize| cost[(i - 1) * cols + (j - 1)];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub gt: usize,
    pub pred: usize,
    pub distance: f64,
}

/// Optimal assignment between `gt` and `pred`, sorted by GT index.
pub fn hungarian_match(gt: &CoordSet, pred: &CoordSet) -> Vec<MatchPair> {
    let (n, m) = (gt.len(), pred.len());
    let mut cost = Vec::with_capacity(n * m);
    for a in &gt.points {
        for b in &pred.points {
            cost.push(dist(a, b));
        }
    }
    linear_sum_assignment(&cost, n, m)
        .into_iter()
        .map(|(g, p)| MatchPair { gt: g, pred: p, distance: cost[g * m + p] })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub t_match: f64,
    /// True-positive pairs.
    pub pairs: Vec<MatchPair>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    /// False when there are no predictions; precision is then reported as 0.
    pub precision_defined: bool,
    pub recall: f64,
    pub f1: f64,
    pub brier: f64,
    pub nll: f64,
    pub n_terms: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub brier: f64,
    pub nll: f64,
    pub n_terms: usize,
}

/// Mean squared error and clipped negative log-likelihood of `(target, p)` terms.
pub fn brier_nll(terms: &[(f64, f64)]) -> Calibration {
    if terms.is_empty() {
        return Calibration { brier: 0.0, nll: 0.0, n_terms: 0 };
    }
    let mut b = 0.0;
    let mut l = 0.0;
    for &(t, p) in terms {
        b += (t - p) * (t - p);
        let q = p.clamp(NLL_EPSILON, 1.0 - NLL_EPSILON);
        l -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
    }
    let n = terms.len() as f64;
    Calibration { brier: b / n, nll: l / n, n_terms: terms.len() }
}

fn validate(pred: &CoordSet, t_match: f64) -> Result<()> {
    if !(t_match > 0.0) {
        return Err(Error::InvalidConfig("t_match must be > 0".into()));
    }
    if let Some(p) = &pred.p {
        if p.len() != pred.len() {
            return Err(Error::Format("probability column length differs from point count".into()));
        }
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format("probabilities must lie in [0, 1]".into()));
        }
    }
    Ok(())
}

/// Calibration terms for a matched scene. Predictions without a probability
/// column are scored as deterministic (p = 1).
pub fn calibration_terms(gt: &CoordSet, pred: &CoordSet, report: &MatchReport) -> Vec<(f64, f64)> {
    let mut partner = vec![None; gt.len()];
    for pr in &report.pairs {
        partner[pr.gt] = Some(pr.pred);
    }
    let mut terms: Vec<(f64, f64)> = partner.iter().map(|m| (1.0, m.map_or(0.0, |j| pred.prob(j)))).collect();
    terms.extend(report.unmatched_pred.iter().map(|&j| (0.0, pred.prob(j))));
    terms
}

pub fn score_detection(gt: &CoordSet, pred: &CoordSet, t_match: f64) -> Result<MatchReport> {
    validate(pred, t_match)?;
    let assignment = hungarian_match(gt, pred);
    let pairs: Vec<MatchPair> = assignment.iter().copied().filter(|p| p.distance <= t_match).collect();
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    for p in &pairs {
        gt_used[p.gt] = true;
        pred_used[p.pred] = true;
    }
    let unmatched_gt: Vec<usize> = (0..gt.len()).filter(|&i| !gt_used[i]).collect();
    let unmatched_pred: Vec<usize> = (0..pred.len()).filter(|&i| !pred_used[i]).collect();
    let tp = pairs.len();
    let fp = unmatched_pred.len();
    let fn_ = unmatched_gt.len();
    let precision_defined = tp + fp > 0;
    let precision = if precision_defined { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f1 = if tp == 0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    let mut report = MatchReport {
        t_match,
        pairs,
        unmatched_gt,
        unmatched_pred,
        tp,
        fp,
        fn_,
        precision,
        precision_defined,
        recall,
        f1,
        brier: 0.0,
        nll: 0.0,
        n_terms: 0,
    };
    let c = brier_nll(&calibration_terms(gt, pred, &report));
    report.brier = c.brier;
    report.nll = c.nll;
    report.n_terms = c.n_terms;
    Ok(report)
}

pub fn score_calibration(gt: &CoordSet, pred: &CoordSet, t_match: f64) -> Result<Calibration> {
    let r = score_detection(gt, pred, t_match)?;
    Ok(Calibration { brier: r.brier, nll: r.nll, n_terms: r.n_terms })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Mean and sample SD (0 for a single value).
    pub fn of(values: &[f64]) -> MeanSd {
        if values.is_empty() {
            return MeanSd { mean: f64::NAN, sd: f64::NAN };
        }
        if values.iter().all(|&v| v == values[0]) {
            return MeanSd { mean: values[0], sd: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanSd { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub samples: usize,
    pub precision: MeanSd,
    pub recall: MeanSd,
    pub f1: MeanSd,
    pub brier: MeanSd,
    pub nll: MeanSd,
}

pub fn aggregate(reports: &[MatchReport]) -> AggregateReport {
    let col = |f: fn(&MatchReport) -> f64| MeanSd::of(&reports.iter().map(f).collect::<Vec<_>>());
    AggregateReport {
        samples: reports.len(),
        precision: col(|r| r.precision),
        recall: col(|r| r.recall),
        f1: col(|r| r.f1),
        brier: col(|r| r.brier),
        nll: col(|r| r.nll),
    }
}
