//! End-to-end synthetic run: oracle regression, tiled proposal detection,
//! classifier training, evaluation against a threshold baseline and spatial
//! analysis.
//!
//! Patches of the tiling (through their owned boxes) are the units of the
//! data split: a test share is held out, and the remainder is split twice into
//! train / validation, once for the threshold baseline and once for the
//! classifier. The forest trains on the whole classifier split; the MLP keeps
//! its validation part for epoch selection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayescore::RegressorOutput;
use crate::classifier::{
    classify_proposals, positives, train_forest, train_mlp_split, Classifier, ForestConfig, MlpConfig, Model,
};
use crate::coords::CoordSet;
use crate::detect::{detect_peaks, NmsConfig};
use crate::error::{Error, Result};
use crate::evalmetrics::{score_detection, MatchReport};
use crate::features::{extract_features, FeatureSpec, MapKind};
use crate::spatial::{BinaryMask, MaskRole, SpatialConfig, SpatialContext, SpatialReport};
use crate::synth::{generate_scene, Scene, SynthSpec};
use crate::volume::{plan_tiling, reconstruct_coordinates, PatchGrid, TilingConfig, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Forest,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { test_fraction: 0.2, val_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Master seed; copied into the scene, classifier and spatial seeds.
    pub seed: u64,
    pub synth: SynthSpec,
    pub tiling: TilingConfig,
    pub nms: NmsConfig,
    pub features: FeatureSpec,
    pub maps: Vec<MapKind>,
    pub classifier: ClassifierKind,
    pub forest: ForestConfig,
    pub mlp: MlpConfig,
    pub t_match_um: f64,
    pub split: SplitConfig,
    /// Number of evenly spaced thresholds in `[0, peak]` tried by the baseline.
    pub threshold_steps: usize,
    pub spatial: SpatialConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            synth: SynthSpec::default(),
            tiling: TilingConfig::default(),
            nms: NmsConfig::default(),
            features: FeatureSpec::default(),
            maps: vec![MapKind::Dm, MapKind::Aleatoric, MapKind::Epistemic],
            classifier: ClassifierKind::Forest,
            forest: ForestConfig::default(),
            mlp: MlpConfig::default(),
            t_match_um: 4.0,
            split: SplitConfig::default(),
            threshold_steps: 101,
            spatial: SpatialConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Small scene with a tiling that fits it; finishes in seconds.
    pub fn tiny() -> Self {
        let mut c = PipelineConfig::default();
        c.synth.shape = [48, 64, 64];
        c.synth.n_cells = 40;
        c.synth.distractors.count = 15;
        c.tiling = TilingConfig::peak([32, 40, 40], [6; 3], [4; 3]);
        c.forest.n_trees = 64;
        c.spatial.replicates = 20;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.tiling.validate()?;
        self.features.validate()?;
        self.spatial.validate()?;
        let f = |v: f64| v > 0.0 && v < 1.0;
        if !f(self.split.test_fraction) || !f(self.split.val_fraction) {
            return Err(Error::InvalidConfig("split ratios must lie in (0, 1)".into()));
        }
        if self.maps.is_empty() || !(self.t_match_um > 0.0) || self.threshold_steps < 2 {
            return Err(Error::InvalidConfig("need >= 1 map, t_match > 0 and >= 2 threshold steps".into()));
        }
        Ok(())
    }

    fn seeded(&self) -> PipelineConfig {
        let mut c = self.clone();
        c.synth.seed = self.seed;
        c.forest.seed = self.seed;
        c.mlp.seed = self.seed;
        c.spatial.seed = self.seed;
        c
    }
}

/// Patch indices of each split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub test: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub clf_train: Vec<usize>,
    pub clf_val: Vec<usize>,
}

fn take_fraction(n: usize, frac: f64) -> usize {
    ((n as f64 * frac).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

pub fn split_patches(n: usize, cfg: &SplitConfig, seed: u64) -> Result<Splits> {
    if n < 3 {
        return Err(Error::InvalidConfig(format!("need >= 3 patches to split, have {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let n_test = take_fraction(n, cfg.test_fraction);
    let test = idx[..n_test].to_vec();
    let rest = idx[n_test..].to_vec();
    let split = |rng: &mut ChaCha8Rng| {
        let mut r = rest.clone();
        r.shuffle(rng);
        let n_val = if r.len() < 2 { 0 } else { take_fraction(r.len(), cfg.val_fraction) };
        let (v, t) = r.split_at(n_val);
        let mut t = t.to_vec();
        let mut v = v.to_vec();
        t.sort_unstable();
        v.sort_unstable();
        (t, v)
    };
    let (train, val) = split(&mut rng);
    let (clf_train, clf_val) = split(&mut rng);
    let mut test = test;
    test.sort_unstable();
    Ok(Splits { test, train, val, clf_train, clf_val })
}

/// Patch whose owned box contains each point.
pub fn owning_patch(grid: &PatchGrid, points: &CoordSet, voxel_size: [f64; 3]) -> Vec<usize> {
    let owned: Vec<_> = grid.patches.iter().map(|p| grid.to_original(&p.owned)).collect();
    points
        .points
        .iter()
        .map(|q| owned.iter().position(|b| b.contains_point(q, voxel_size)).unwrap_or(usize::MAX))
        .collect()
}

/// NMS on each patch's regressor-output window, reassembled in the volume frame.
pub fn tiled_detection(dm: &Volume3D, grid: &PatchGrid, tiling: &TilingConfig, nms: &NmsConfig) -> Result<CoordSet> {
    let vs = dm.voxel_size();
    let per_patch: Vec<CoordSet> = grid
        .patches
        .par_iter()
        .map(|p| {
            let window = grid.extract(dm, &p.cnn_output);
            let local = detect_peaks(&window, nms)?;
            Ok(grid.cnn_to_output_local(p, &local, vs))
        })
        .collect::<Result<_>>()?;
    reconstruct_coordinates(&per_patch, grid, tiling, vs)
}

/// Plans the tiling for `dm` and runs [`tiled_detection`].
pub fn plan_and_detect(dm: &Volume3D, tiling: &TilingConfig, nms: &NmsConfig) -> Result<CoordSet> {
    let grid = plan_tiling(dm.shape(), tiling)?;
    tiled_detection(dm, &grid, tiling, nms)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn volume_hash(v: &Volume3D) -> String {
    let mut buf = Vec::with_capacity(v.len() * 4);
    v.write_raw(&mut buf).expect("writing to memory");
    sha256_hex(&buf)
}

pub fn coords_hash(c: &CoordSet) -> Result<String> {
    let mut buf = Vec::new();
    c.write_csv(&mut buf)?;
    Ok(sha256_hex(&buf))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub brier: f64,
    pub nll: f64,
    pub n_terms: usize,
}

impl DetectionSummary {
    /// Counts and F1 from `det`, calibration from `cal`.
    pub fn new(det: &MatchReport, cal: &MatchReport) -> Self {
        DetectionSummary {
            tp: det.tp,
            fp: det.fp,
            fn_: det.fn_,
            precision: det.precision,
            recall: det.recall,
            f1: det.f1,
            brier: cal.brier,
            nll: cal.nll,
            n_terms: cal.n_terms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hashes {
    pub dm: String,
    pub aleatoric: String,
    pub epistemic: String,
    pub structure: String,
    pub tissue: String,
    pub gt: String,
    pub proposals: String,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub format: String,
    pub version: u32,
    pub config: PipelineConfig,
    pub seed: u64,
    pub patches: usize,
    pub splits: Splits,
    pub n_gt: usize,
    pub n_proposals: usize,
    pub n_training_proposals: usize,
    pub baseline_threshold: f64,
    /// Proposals with classifier probabilities on the test patches.
    pub probabilistic: DetectionSummary,
    /// Proposals above the validation-selected threshold, scored with p = 1.
    pub deterministic: DetectionSummary,
    pub spatial_gt: SpatialReport,
    pub spatial_deterministic: SpatialReport,
    pub spatial_probabilistic: SpatialReport,
    pub hashes: Hashes,
}

pub struct PipelineOutput {
    pub report: PipelineReport,
    pub scene: Scene,
    pub proposals: CoordSet,
    pub model: Classifier,
}

fn in_patches(owner: &[usize], set: &[usize]) -> Vec<usize> {
    (0..owner.len()).filter(|&i| set.binary_search(&owner[i]).is_ok()).collect()
}

fn labels_by_matching(gt: &CoordSet, proposals: &CoordSet, t_match: f64) -> Result<Vec<u8>> {
    let r = score_detection(gt, proposals, t_match)?;
    let mut y = vec![0u8; proposals.len()];
    for p in &r.pairs {
        y[p.pred] = 1;
    }
    Ok(y)
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let cfg = cfg.seeded();
    let scene = generate_scene(&cfg.synth)?;
    let vs = cfg.synth.voxel_size_um;
    let reg = &scene.regressor;

    let grid = plan_tiling(cfg.synth.shape, &cfg.tiling)?;
    let proposals = tiled_detection(&reg.dm, &grid, &cfg.tiling, &NmsConfig { threshold: 0.0, ..cfg.nms })?;
    let splits = split_patches(grid.patches.len(), &cfg.split, cfg.seed)?;
    let prop_owner = owning_patch(&grid, &proposals, vs);
    let gt_owner = owning_patch(&grid, &scene.cells, vs);
    let region = |set: &[usize]| -> Vec<usize> {
        let mut s = set.to_vec();
        s.sort_unstable();
        s
    };
    let non_test = region(&[splits.train.clone(), splits.val.clone()].concat());
    let subset = |c: &CoordSet, owner: &[usize], set: &[usize]| c.select(&in_patches(owner, set));

    // classifier training data: everything outside the test patches
    let maps_all: Vec<(MapKind, &Volume3D)> = cfg
        .maps
        .iter()
        .map(|&k| {
            (
                k,
                match k {
                    MapKind::Dm => &reg.dm,
                    MapKind::Aleatoric => &reg.aleatoric,
                    MapKind::Epistemic => &reg.epistemic,
                },
            )
        })
        .collect();
    let train_idx = in_patches(&prop_owner, &non_test);
    let train_props = proposals.select(&train_idx);
    let train_gt = subset(&scene.cells, &gt_owner, &non_test);
    let labels = labels_by_matching(&train_gt, &train_props, cfg.t_match_um)?;
    let x = extract_features(&maps_all, &train_props, &cfg.features)?;
    let model = match cfg.classifier {
        ClassifierKind::Forest => Model::Forest(train_forest(&x, &labels, &cfg.forest)?),
        ClassifierKind::Mlp => {
            let clf_val = region(&splits.clf_val);
            let (tr, va): (Vec<usize>, Vec<usize>) =
                (0..train_idx.len()).partition(|&k| clf_val.binary_search(&prop_owner[train_idx[k]]).is_err());
            Model::Mlp(train_mlp_split(&x, &labels, &tr, &va, &cfg.mlp)?)
        }
    };
    let model = Classifier::new(cfg.maps.clone(), cfg.features.clone(), model)?;

    // threshold baseline: best F1 on the validation patches
    let val = region(&splits.val);
    let val_props = subset(&proposals, &prop_owner, &val);
    let val_gt = subset(&scene.cells, &gt_owner, &val);
    let peak = cfg.synth.kernel.peak_value();
    let steps = cfg.threshold_steps;
    let scores: Vec<(f64, f64)> = (0..steps)
        .into_par_iter()
        .map(|k| {
            let t = peak * k as f64 / (steps - 1) as f64;
            let det = threshold_detections(&val_props, t);
            Ok((t, score_detection(&val_gt, &det, cfg.t_match_um)?.f1))
        })
        .collect::<Result<_>>()?;
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 > best.1 {
            best = s;
        }
    }
    let threshold = best.0;

    // evaluation on the test patches
    let test = region(&splits.test);
    let test_gt = subset(&scene.cells, &gt_owner, &test);
    let test_props = subset(&proposals, &prop_owner, &test);
    let classified = classify_proposals(&model, &maps_all, &test_props)?;
    let prob = DetectionSummary::new(
        &score_detection(&test_gt, &positives(&classified), cfg.t_match_um)?,
        &score_detection(&test_gt, &classified, cfg.t_match_um)?,
    );
    let det_pred = threshold_detections(&test_props, threshold);
    let det_report = score_detection(&test_gt, &det_pred, cfg.t_match_um)?;
    let det = DetectionSummary::new(&det_report, &det_report);

    // spatial analysis restricted to tissue inside the test patches
    let test_boxes: Vec<_> = test.iter().map(|&i| grid.to_original(&grid.patches[i].owned)).collect();
    let test_tissue = BinaryMask::from_fn(MaskRole::Tissue, cfg.synth.shape, vs, |v| {
        let vi = [v[0] as i64, v[1] as i64, v[2] as i64];
        test_boxes.iter().any(|b| b.contains_voxel(vi))
            && scene.tissue.is_set(scene.tissue.mask.index(v[0], v[1], v[2]))
    })?;
    let ctx = SpatialContext::new(&scene.structure, &test_tissue, cfg.spatial.adjacency_um)?;
    let spatial_gt = ctx.analyze_deterministic(&test_gt, &cfg.spatial)?;
    let spatial_det = ctx.analyze_deterministic(&classified, &cfg.spatial)?;
    let spatial_prob = ctx.analyze_probabilistic(&classified, &cfg.spatial)?;

    let hashes = Hashes {
        dm: volume_hash(&reg.dm),
        aleatoric: volume_hash(&reg.aleatoric),
        epistemic: volume_hash(&reg.epistemic),
        structure: volume_hash(&scene.structure.to_volume()),
        tissue: volume_hash(&scene.tissue.to_volume()),
        gt: coords_hash(&scene.cells)?,
        proposals: coords_hash(&proposals)?,
        model: sha256_hex(model.to_json()?.as_bytes()),
    };
    let report = PipelineReport {
        format: "probdetect-pipeline-report".into(),
        version: 1,
        seed: cfg.seed,
        patches: grid.patches.len(),
        splits,
        n_gt: scene.cells.len(),
        n_proposals: proposals.len(),
        n_training_proposals: train_props.len(),
        baseline_threshold: threshold,
        probabilistic: prob,
        deterministic: det,
        spatial_gt,
        spatial_deterministic: spatial_det,
        spatial_probabilistic: spatial_prob,
        hashes,
        config: cfg,
    };
    Ok(PipelineOutput { report, scene, proposals, model })
}

/// Proposals whose density value exceeds `t`. Equals NMS run at threshold `t`,
/// since a peak is only ever suppressed by a stronger one.
pub fn threshold_detections(proposals: &CoordSet, t: f64) -> CoordSet {
    match &proposals.dm_value {
        Some(v) => proposals.filter(|i| v[i] > t),
        None => proposals.clone(),
    }
}

impl PipelineOutput {
    /// Writes the report, maps, masks, coordinates and model into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.report.to_json()?)?;
        write_regressor_and_masks(dir, &self.scene.regressor, &self.scene.structure, &self.scene.tissue)?;
        self.scene.cells.save(dir.join("gt.csv"))?;
        self.proposals.save(dir.join("proposals.csv"))?;
        self.model.save(dir.join("model.json"))?;
        Ok(())
    }
}

pub fn write_regressor_and_masks(
    dir: &Path,
    reg: &RegressorOutput,
    structure: &BinaryMask,
    tissue: &BinaryMask,
) -> Result<()> {
    reg.save(dir)?;
    structure.save(dir.join("structure.raw"))?;
    tissue.save(dir.join("tissue.raw"))?;
    Ok(())
}

impl PipelineReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
