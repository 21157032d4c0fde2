//! Random forest of gini-split binary decision trees.
//!
//! Each tree sees a bootstrap resample (kept as integer multiplicities) and, at
//! every node, a random subset of `ceil(sqrt(d))` non-constant features. Split
//! thresholds are midpoints of consecutive distinct values; `x <= threshold`
//! goes left. Ties between equally good splits go to the lowest feature index,
//! then the lowest threshold. Leaves keep positive and total counts.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    Sqrt,
    All,
    Count(usize),
}

impl MaxFeatures {
    fn resolve(self, d: usize) -> usize {
        match self {
            MaxFeatures::Sqrt => ((d as f64).sqrt().ceil() as usize).max(1),
            MaxFeatures::All => d,
            MaxFeatures::Count(k) => k.clamp(1, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_features: MaxFeatures,
    pub bootstrap: bool,
    pub min_samples_split: usize,
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 128,
            max_features: MaxFeatures::Sqrt,
            bootstrap: true,
            min_samples_split: 2,
            max_depth: None,
            seed: 0,
        }
    }
}

/// Flat node arrays; `feature[i] < 0` marks a leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub feature: Vec<i32>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub positive: Vec<f64>,
    pub total: Vec<f64>,
}

impl Tree {
    fn push_leaf(&mut self, pos: f64, total: f64) -> usize {
        self.feature.push(-1);
        self.threshold.push(0.0);
        self.left.push(0);
        self.right.push(0);
        self.positive.push(pos);
        self.total.push(total);
        self.feature.len() - 1
    }

    pub fn num_nodes(&self) -> usize {
        self.feature.len()
    }

    pub fn leaf_of(&self, x: &[f64]) -> usize {
        let mut i = 0;
        while self.feature[i] >= 0 {
            i = if x[self.feature[i] as usize] <= self.threshold[i] {
                self.left[i] as usize
            } else {
                self.right[i] as usize
            };
        }
        i
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let l = self.leaf_of(x);
        self.positive[l] / self.total[l]
    }

    fn check(&self) -> Result<()> {
        let n = self.num_nodes();
        let lens = [self.threshold.len(), self.left.len(), self.right.len(), self.positive.len(), self.total.len()];
        if n == 0 || lens.iter().any(|&l| l != n) {
            return Err(Error::Format("tree node arrays are inconsistent".into()));
        }
        for i in 0..n {
            if self.feature[i] >= 0 {
                let (l, r) = (self.left[i] as usize, self.right[i] as usize);
                if l >= n || r >= n || l <= i || r <= i {
                    return Err(Error::Format(format!("tree node {i} has invalid children")));
                }
            } else if !(self.total[i] >= 1.0) || !(0.0..=self.total[i]).contains(&self.positive[i]) {
                return Err(Error::Format(format!("tree leaf {i} has invalid counts")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub n_features: usize,
    pub config: ForestConfig,
    pub trees: Vec<Tree>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Split {
    pub feature: usize,
    pub threshold: f64,
    /// Sum over children of `pos * neg / weight`; smaller is purer.
    pub proxy: f64,
}

fn better(a: &Split, b: &Split) -> bool {
    match a.proxy.total_cmp(&b.proxy) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => (a.feature, a.threshold) < (b.feature, b.threshold),
    }
}

/// Best threshold on one feature, or `None` if the feature is constant on the node.
fn best_split_on(
    x: &FeatureMatrix,
    y: &[u8],
    samples: &[(usize, f64)],
    feature: usize,
    scratch: &mut Vec<(f64, f64, f64)>,
) -> Option<Split> {
    scratch.clear();
    scratch.extend(samples.iter().map(|&(i, w)| (x.get(i, feature), w, if y[i] == 1 { w } else { 0.0 })));
    scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
    if scratch.first()?.0 == scratch.last()?.0 {
        return None;
    }
    let (tot_w, tot_p) = scratch.iter().fold((0.0, 0.0), |acc, s| (acc.0 + s.1, acc.1 + s.2));
    let mut lw = 0.0;
    let mut lp = 0.0;
    let mut best: Option<Split> = None;
    for k in 0..scratch.len() - 1 {
        lw += scratch[k].1;
        lp += scratch[k].2;
        let (a, b) = (scratch[k].0, scratch[k + 1].0);
        if a == b {
            continue;
        }
        let rw = tot_w - lw;
        let rp = tot_p - lp;
        let proxy = lp * (lw - lp) / lw + rp * (rw - rp) / rw;
        let mut thr = a + (b - a) / 2.0;
        if thr >= b {
            thr = a;
        }
        let cand = Split { feature, threshold: thr, proxy };
        if best.as_ref().is_none_or(|bst| better(&cand, bst)) {
            best = Some(cand);
        }
    }
    best
}

struct Builder<'a> {
    x: &'a FeatureMatrix,
    y: &'a [u8],
    cfg: &'a ForestConfig,
    k: usize,
    rng: ChaCha8Rng,
    tree: Tree,
    scratch: Vec<(f64, f64, f64)>,
    order: Vec<usize>,
}

impl Builder<'_> {
    fn choose_split(&mut self, samples: &[(usize, f64)]) -> Option<Split> {
        self.order.shuffle(&mut self.rng);
        let mut best: Option<Split> = None;
        let mut visited = 0;
        for oi in 0..self.order.len() {
            let f = self.order[oi];
            if let Some(s) = best_split_on(self.x, self.y, samples, f, &mut self.scratch) {
                visited += 1;
                if best.as_ref().is_none_or(|b| better(&s, b)) {
                    best = Some(s);
                }
                if visited == self.k {
                    break;
                }
            }
        }
        best
    }

    fn build(&mut self, samples: Vec<(usize, f64)>, depth: usize) -> usize {
        let total = samples.iter().fold(0.0, |a, s| a + s.1);
        let pos = samples.iter().filter(|s| self.y[s.0] == 1).fold(0.0, |a, s| a + s.1);
        let stop = pos == 0.0
            || pos == total
            || total < self.cfg.min_samples_split as f64
            || self.cfg.max_depth.is_some_and(|m| depth >= m);
        let split = if stop { None } else { self.choose_split(&samples) };
        let Some(split) = split else {
            return self.tree.push_leaf(pos, total);
        };
        let node = self.tree.push_leaf(pos, total);
        self.tree.feature[node] = split.feature as i32;
        self.tree.threshold[node] = split.threshold;
        let (l, r): (Vec<_>, Vec<_>) =
            samples.into_iter().partition(|s| self.x.get(s.0, split.feature) <= split.threshold);
        let li = self.build(l, depth + 1);
        let ri = self.build(r, depth + 1);
        self.tree.left[node] = li as u32;
        self.tree.right[node] = ri as u32;
        node
    }
}

pub(crate) fn check_labels(x: &FeatureMatrix, labels: &[u8]) -> Result<()> {
    if labels.len() != x.rows {
        return Err(Error::DimensionMismatch { expected: x.rows, got: labels.len() });
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Format("labels must be 0 or 1".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::SingleClass);
    }
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("feature matrix contains non-finite values".into()));
    }
    Ok(())
}

pub(crate) fn train_tree(x: &FeatureMatrix, labels: &[u8], cfg: &ForestConfig, tree_index: usize) -> Tree {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(tree_index as u64));
    let n = x.rows;
    let samples: Vec<(usize, f64)> = if cfg.bootstrap {
        let mut counts = vec![0u32; n];
        for _ in 0..n {
            counts[rng.random_range(0..n)] += 1;
        }
        counts.iter().enumerate().filter(|(_, &c)| c > 0).map(|(i, &c)| (i, c as f64)).collect()
    } else {
        (0..n).map(|i| (i, 1.0)).collect()
    };
    let mut b = Builder {
        x,
        y: labels,
        cfg,
        k: cfg.max_features.resolve(x.cols),
        rng,
        tree: Tree {
            feature: Vec::new(),
            threshold: Vec::new(),
            left: Vec::new(),
            right: Vec::new(),
            positive: Vec::new(),
            total: Vec::new(),
        },
        scratch: Vec::new(),
        order: (0..x.cols).collect(),
    };
    b.build(samples, 0);
    b.tree
}

/// Trains the forest; tree `t` is seeded with `seed + t`.
pub fn train_forest(x: &FeatureMatrix, labels: &[u8], cfg: &ForestConfig) -> Result<ForestModel> {
    check_labels(x, labels)?;
    if cfg.n_trees == 0 || cfg.min_samples_split < 2 || x.cols == 0 {
        return Err(Error::InvalidConfig("forest needs >= 1 tree, min_samples_split >= 2 and >= 1 feature".into()));
    }
    let trees = (0..cfg.n_trees).into_par_iter().map(|t| train_tree(x, labels, cfg, t)).collect();
    Ok(ForestModel { n_features: x.cols, config: cfg.clone(), trees })
}

impl ForestModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let s: f64 = self.trees.iter().map(|t| t.predict(row)).sum();
        s / self.trees.len() as f64
    }

    pub fn predict_proba(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        if x.cols != self.n_features {
            return Err(Error::DimensionMismatch { expected: self.n_features, got: x.cols });
        }
        Ok((0..x.rows).into_par_iter().map(|i| self.predict_row(x.row(i))).collect())
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.trees.is_empty() {
            return Err(Error::Format("forest has no trees".into()));
        }
        for t in &self.trees {
            t.check()?;
            if t.feature.iter().any(|&f| f >= self.n_features as i32) {
                return Err(Error::Format("tree references a feature out of range".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[Vec<f64>]) -> FeatureMatrix {
        let cols = rows[0].len();
        FeatureMatrix::new(rows.len(), cols, rows.iter().flatten().copied().collect())
    }

    /// Exhaustive reference tree using exact rational comparisons.
    #[derive(Debug, PartialEq)]
    enum RefNode {
        Leaf(u32, u32),
        Split(usize, f64, Box<RefNode>, Box<RefNode>),
    }

    fn reference_tree(x: &[Vec<f64>], y: &[u8], idx: Vec<usize>) -> RefNode {
        let pos = idx.iter().filter(|&&i| y[i] == 1).count() as u32;
        let tot = idx.len() as u32;
        if pos == 0 || pos == tot || tot < 2 {
            return RefNode::Leaf(pos, tot);
        }
        // best = smallest sum over children of pos*neg/n, kept as a fraction
        let mut best: Option<(i64, i64, usize, f64)> = None;
        for f in 0..x[0].len() {
            let mut vals: Vec<f64> = idx.iter().map(|&i| x[i][f]).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for w in vals.windows(2) {
                let thr = w[0] + (w[1] - w[0]) / 2.0;
                let (mut lp, mut ln, mut rp, mut rn) = (0i64, 0i64, 0i64, 0i64);
                for &i in &idx {
                    let left = x[i][f] <= thr;
                    match (left, y[i]) {
                        (true, 1) => lp += 1,
                        (true, _) => ln += 1,
                        (false, 1) => rp += 1,
                        (false, _) => rn += 1,
                    }
                }
                let (l, r) = (lp + ln, rp + rn);
                let num = lp * ln * r + rp * rn * l;
                let den = l * r;
                let take = match &best {
                    None => true,
                    Some((bn, bd, bf, bt)) => {
                        let c = (num * bd).cmp(&(bn * den));
                        c == Ordering::Less || (c == Ordering::Equal && (f, thr) < (*bf, *bt))
                    }
                };
                if take {
                    best = Some((num, den, f, thr));
                }
            }
        }
        match best {
            None => RefNode::Leaf(pos, tot),
            Some((_, _, f, thr)) => {
                let (l, r): (Vec<_>, Vec<_>) = idx.into_iter().partition(|&i| x[i][f] <= thr);
                RefNode::Split(f, thr, Box::new(reference_tree(x, y, l)), Box::new(reference_tree(x, y, r)))
            }
        }
    }

    fn to_ref(t: &Tree, i: usize) -> RefNode {
        if t.feature[i] < 0 {
            RefNode::Leaf(t.positive[i] as u32, t.total[i] as u32)
        } else {
            RefNode::Split(
                t.feature[i] as usize,
                t.threshold[i],
                Box::new(to_ref(t, t.left[i] as usize)),
                Box::new(to_ref(t, t.right[i] as usize)),
            )
        }
    }

    #[test]
    fn matches_exhaustive_gini_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..200 {
            let n = rng.random_range(2..=8);
            let rows: Vec<Vec<f64>> =
                (0..n).map(|_| vec![rng.random_range(0..5) as f64, rng.random_range(0..5) as f64 * 0.5]).collect();
            let mut y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            y[0] = 0;
            y[1] = 1;
            let cfg = ForestConfig { n_trees: 1, bootstrap: false, seed: trial, ..Default::default() };
            let f = train_forest(&matrix(&rows), &y, &cfg).unwrap();
            assert_eq!(to_ref(&f.trees[0], 0), reference_tree(&rows, &y, (0..n).collect()), "trial {trial}");
        }
    }

    #[test]
    fn separable_data_is_fit_exactly() {
        let xs: Vec<f64> = (1..=10).flat_map(|i| [-(i as f64), i as f64]).collect();
        let rows: Vec<Vec<f64>> = xs.iter().map(|&v| vec![v]).collect();
        let y: Vec<u8> = xs.iter().map(|&v| (v > 0.0) as u8).collect();
        let f = train_forest(&matrix(&rows), &y, &ForestConfig::default()).unwrap();
        let p = f.predict_proba(&matrix(&rows)).unwrap();
        for (pi, yi) in p.iter().zip(&y) {
            assert!((pi - *yi as f64).abs() < 0.25, "{pi} vs {yi}");
            assert_eq!((*pi >= 0.5) as u8, *yi);
        }
    }

    #[test]
    fn conflicting_duplicates_average_to_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let mut rows = base.clone();
        rows.extend(base.iter().cloned());
        let y: Vec<u8> = (0..80).map(|i| (i >= 40) as u8).collect();
        let f = train_forest(&matrix(&rows), &y, &ForestConfig::default()).unwrap();
        let p = f.predict_proba(&matrix(&base)).unwrap();
        for pi in p {
            assert!((pi - 0.5).abs() <= 0.1, "{pi}");
        }
    }

    #[test]
    fn single_class_rejected() {
        let x = matrix(&[vec![1.0], vec![2.0]]);
        assert!(matches!(train_forest(&x, &[1, 1], &ForestConfig::default()), Err(Error::SingleClass)));
    }

    #[test]
    fn single_tree_forest_returns_leaf_fraction() {
        let rows: Vec<Vec<f64>> = vec![vec![0.0], vec![0.0], vec![0.0], vec![1.0]];
        let y = [1, 0, 0, 1];
        let cfg = ForestConfig { n_trees: 1, bootstrap: false, ..Default::default() };
        let f = train_forest(&matrix(&rows), &y, &cfg).unwrap();
        let p = f.predict_proba(&matrix(&[vec![0.0], vec![1.0]])).unwrap();
        assert_eq!(p, vec![1.0 / 3.0, 1.0]);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rows: Vec<Vec<f64>> = (0..200).map(|_| (0..9).map(|_| rng.random::<f64>()).collect()).collect();
        let y: Vec<u8> = rows.iter().map(|r| (r[0] + 0.3 * r[4] > 0.6) as u8).collect();
        let x = matrix(&rows);
        let cfg = ForestConfig { seed: 99, n_trees: 16, ..Default::default() };
        let a = train_forest(&x, &y, &cfg).unwrap().predict_proba(&x).unwrap();
        let b = train_forest(&x, &y, &cfg).unwrap().predict_proba(&x).unwrap();
        assert_eq!(a, b);
    }

    /// Midpoint thresholds move under a non-linear transform, so only points
    /// every tree was fit on are guaranteed to land on the same side.
    #[test]
    fn monotone_feature_transform_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let rows: Vec<Vec<f64>> = (0..60).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let y: Vec<u8> = rows.iter().map(|r| (r[1] > 0.2 || r[2] < -1.0) as u8).collect();
        let t: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[0], r[1].powi(3) + 5.0, r[2]]).collect();
        let cfg = ForestConfig { seed: 4, n_trees: 32, bootstrap: false, ..Default::default() };
        let a = train_forest(&matrix(&rows), &y, &cfg).unwrap().predict_proba(&matrix(&rows)).unwrap();
        let b = train_forest(&matrix(&t), &y, &cfg).unwrap().predict_proba(&matrix(&t)).unwrap();
        assert_eq!(a, b);
    }
}
