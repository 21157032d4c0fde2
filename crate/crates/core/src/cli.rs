//! Command-line front end.
//!
//! Every subcommand reads an optional JSON config (`--config`) layered over
//! built-in defaults; flags given on the command line win over both. Exit
//! status is 0 on success, 1 on a domain error (with an error JSON on stderr)
//! and 2 on a usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::classifier::{
    classify_proposals, positives, train_forest, train_mlp, Classifier, ForestConfig, MlpConfig, Model,
};
use crate::coords::CoordSet;
use crate::densitymap::{render_dm, KernelSpec};
use crate::detect::{detect_peaks, NmsConfig};
use crate::error::Error;
use crate::evalmetrics::{score_detection, MatchReport};
use crate::features::{extract_features, FeatureSpec, MapKind};
use crate::pipeline::{
    plan_and_detect, run_pipeline, write_regressor_and_masks, ClassifierKind, DetectionSummary, PipelineConfig,
};
use crate::spatial::{AnalysisMode, BinaryMask, MaskRole, SpatialConfig, SpatialContext};
use crate::synth::{generate_scene, SynthSpec};
use crate::volume::{TilingConfig, Volume3D};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "PROBDETECT_THREADS";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Domain(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Domain(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Domain(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "probdetect", version, about = "Probabilistic 3D cell detection on density maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene: maps, masks and ground-truth coordinates.
    Synth(SynthArgs),
    /// Render a ground-truth density map from coordinates.
    RenderDm(RenderArgs),
    /// Non-maximum suppression on a density map, optionally tiled.
    Detect(DetectArgs),
    /// Window statistics around proposals.
    Features(FeaturesArgs),
    /// Train a proposal classifier against ground truth.
    TrainClassifier(TrainArgs),
    /// Attach classifier probabilities to proposals.
    Classify(ClassifyArgs),
    /// Match predictions to ground truth and score them.
    Eval(EvalArgs),
    /// Distance-to-structure analysis of a cell set.
    Spatial(SpatialArgs),
    /// Full synthetic run from scene generation to spatial statistics.
    Pipeline(PipelineArgs),
}

fn parse_triple<T: std::str::FromStr + Copy>(s: &str) -> std::result::Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let parse = |p: &str| p.parse::<T>().map_err(|_| format!("cannot parse '{p}'"));
    match parts.as_slice() {
        [a] => {
            let v = parse(a)?;
            Ok([v; 3])
        }
        [a, b, c] => Ok([parse(a)?, parse(b)?, parse(c)?]),
        _ => Err("expected one value or three comma-separated values (z,y,x)".into()),
    }
}

fn usize3(s: &str) -> std::result::Result<[usize; 3], String> {
    parse_triple(s)
}

fn f64x3(s: &str) -> std::result::Result<[f64; 3], String> {
    parse_triple(s)
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Volume shape in voxels, `z,y,x` or a single value.
    #[arg(long, value_parser = usize3)]
    pub shape: Option<[usize; 3]>,
    #[arg(long, value_parser = f64x3)]
    pub voxel_size: Option<[f64; 3]>,
    #[arg(long)]
    pub n_cells: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub distractors: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub coords: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = usize3)]
    pub shape: Option<[usize; 3]>,
    #[arg(long, value_parser = f64x3)]
    pub voxel_size: Option<[f64; 3]>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub cutoff: Option<f64>,
    /// `K_max` or `K_sum`.
    #[arg(long)]
    pub compounding: Option<String>,
    /// `unit_peak` or `normalized`.
    #[arg(long)]
    pub amplitude: Option<String>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dm: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub min_distance: Option<f64>,
    /// Regressor input tile in voxels; enables tiled detection.
    #[arg(long, value_parser = usize3)]
    pub tile: Option<[usize; 3]>,
    #[arg(long, value_parser = usize3)]
    pub conv_margin: Option<[usize; 3]>,
    #[arg(long, value_parser = usize3)]
    pub peak_margin: Option<[usize; 3]>,
    /// `M_peak` or `M_conv`.
    #[arg(long)]
    pub strategy: Option<String>,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    #[arg(long)]
    pub dm: Option<PathBuf>,
    #[arg(long)]
    pub aleatoric: Option<PathBuf>,
    #[arg(long)]
    pub epistemic: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub proposals: Option<PathBuf>,
    #[command(flatten)]
    pub maps: MapArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub proposals: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[command(flatten)]
    pub maps: MapArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `forest` or `mlp`.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_trees: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub t_match: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub proposals: Option<PathBuf>,
    #[command(flatten)]
    pub maps: MapArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub t_match: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SpatialArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub cells: Option<PathBuf>,
    #[arg(long)]
    pub structure: Option<PathBuf>,
    #[arg(long)]
    pub tissue: Option<PathBuf>,
    /// `deterministic` or `probabilistic`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Plot-ready CSV of the curves.
    #[arg(long)]
    pub curves: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub adjacency: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Base configuration the file is layered on: `default` or `tiny`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = usize3)]
    pub shape: Option<[usize; 3]>,
    #[arg(long)]
    pub n_cells: Option<usize>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// `forest` or `mlp`.
    #[arg(long)]
    pub classifier: Option<String>,
}

#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthRun {
    pub out: Option<PathBuf>,
    pub synth: SynthSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderRun {
    pub coords: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub shape: [usize; 3],
    pub voxel_size_um: [f64; 3],
    pub kernel: KernelSpec,
}

impl Default for RenderRun {
    fn default() -> Self {
        RenderRun { coords: None, out: None, shape: [64; 3], voxel_size_um: [1.0; 3], kernel: KernelSpec::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectRun {
    pub dm: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub nms: NmsConfig,
    pub tiling: Option<TilingConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapPaths {
    pub dm: Option<PathBuf>,
    pub aleatoric: Option<PathBuf>,
    pub epistemic: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturesRun {
    pub proposals: Option<PathBuf>,
    pub maps: MapPaths,
    pub out: Option<PathBuf>,
    pub features: FeatureSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRun {
    pub proposals: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub maps: MapPaths,
    pub out: Option<PathBuf>,
    pub classifier: ClassifierKind,
    pub seed: u64,
    pub t_match_um: f64,
    pub features: FeatureSpec,
    pub forest: ForestConfig,
    pub mlp: MlpConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            proposals: None,
            gt: None,
            maps: MapPaths::default(),
            out: None,
            classifier: ClassifierKind::Forest,
            seed: 0,
            t_match_um: 4.0,
            features: FeatureSpec::default(),
            forest: ForestConfig::default(),
            mlp: MlpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyRun {
    pub model: Option<PathBuf>,
    pub proposals: Option<PathBuf>,
    pub maps: MapPaths,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalRun {
    pub gt: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub t_match_um: f64,
}

impl Default for EvalRun {
    fn default() -> Self {
        EvalRun { gt: None, pred: None, out: None, t_match_um: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpatialRun {
    pub cells: Option<PathBuf>,
    pub structure: Option<PathBuf>,
    pub tissue: Option<PathBuf>,
    pub mode: AnalysisMode,
    pub out: Option<PathBuf>,
    pub curves: Option<PathBuf>,
    pub spatial: SpatialConfig,
}

impl Default for SpatialRun {
    fn default() -> Self {
        SpatialRun {
            cells: None,
            structure: None,
            tissue: None,
            mode: AnalysisMode::Probabilistic,
            out: None,
            curves: None,
            spatial: SpatialConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineRun {
    pub out: Option<PathBuf>,
    pub pipeline: PipelineConfig,
}

/// Recursively overwrites `base` with the entries of `top`.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// `base` with the JSON document at `file` layered on top.
pub fn layered<T: Serialize + DeserializeOwned>(base: T, file: Option<&Path>) -> crate::Result<T> {
    let Some(file) = file else { return Ok(base) };
    let mut v = serde_json::to_value(&base)?;
    let top: Value = serde_json::from_str(&std::fs::read_to_string(file)?)?;
    merge(&mut v, top);
    Ok(serde_json::from_value(v)?)
}

/// Parses a flag value with the serde name of an enum variant.
fn named<T: DeserializeOwned>(flag: &str, s: &str) -> CliResult<T> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| CliError::Usage(format!("invalid value '{s}' for --{flag}")))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::Usage(format!("missing --{flag} (or \"{flag}\" in the config file)")))
}

fn distinct_paths(paths: &[&Option<PathBuf>]) -> CliResult<()> {
    let set: Vec<&PathBuf> = paths.iter().filter_map(|p| p.as_ref()).collect();
    for (i, a) in set.iter().enumerate() {
        if set[i + 1..].contains(a) {
            return Err(CliError::Usage(format!("path {} is used twice", a.display())));
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult<()> {
    let s = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, s + "\n")?,
        None => println!("{s}"),
    }
    Ok(())
}

fn merge_maps(cfg: &mut MapPaths, args: MapArgs) {
    set_opt(&mut cfg.dm, args.dm);
    set_opt(&mut cfg.aleatoric, args.aleatoric);
    set_opt(&mut cfg.epistemic, args.epistemic);
}

/// Loads the supplied maps in the fixed order dm, aleatoric, epistemic.
fn load_maps(paths: &MapPaths) -> CliResult<Vec<(MapKind, Volume3D)>> {
    if paths.dm.is_none() && paths.aleatoric.is_none() && paths.epistemic.is_none() {
        return Err(CliError::Usage("at least --dm is required".into()));
    }
    let mut out = Vec::new();
    for (kind, p) in
        [(MapKind::Dm, &paths.dm), (MapKind::Aleatoric, &paths.aleatoric), (MapKind::Epistemic, &paths.epistemic)]
    {
        if let Some(p) = p {
            out.push((kind, Volume3D::load(p)?));
        }
    }
    Ok(out)
}

fn map_refs(maps: &[(MapKind, Volume3D)]) -> Vec<(MapKind, &Volume3D)> {
    maps.iter().map(|(k, v)| (*k, v)).collect()
}

#[derive(Serialize)]
struct SynthManifest<'a> {
    format: &'static str,
    spec: &'a SynthSpec,
    n_cells: usize,
    n_distractors: usize,
    files: [&'static str; 8],
}

fn run_synth(a: SynthArgs) -> CliResult<()> {
    let mut cfg = layered(SynthRun::default(), a.config.as_deref())?;
    set_opt(&mut cfg.out, a.out);
    set(&mut cfg.synth.seed, a.seed);
    set(&mut cfg.synth.shape, a.shape);
    set(&mut cfg.synth.voxel_size_um, a.voxel_size);
    set(&mut cfg.synth.n_cells, a.n_cells);
    set(&mut cfg.synth.kernel.sigma_um, a.sigma);
    set(&mut cfg.synth.distractors.count, a.distractors);
    let out = required(&cfg.out, "out")?;
    let scene = generate_scene(&cfg.synth)?;
    std::fs::create_dir_all(out)?;
    write_regressor_and_masks(out, &scene.regressor, &scene.structure, &scene.tissue)?;
    scene.cells.save(out.join("gt.csv"))?;
    scene.distractors.save(out.join("distractors.csv"))?;
    let manifest = SynthManifest {
        format: "probdetect-synth",
        spec: &cfg.synth,
        n_cells: scene.cells.len(),
        n_distractors: scene.distractors.len(),
        files: [
            "dm.raw",
            "aleatoric.raw",
            "epistemic.raw",
            "regressor.json",
            "structure.raw",
            "tissue.raw",
            "gt.csv",
            "distractors.csv",
        ],
    };
    write_json(&manifest, Some(&out.join("manifest.json")))
}

fn run_render(a: RenderArgs) -> CliResult<()> {
    let mut cfg = layered(RenderRun::default(), a.config.as_deref())?;
    set_opt(&mut cfg.coords, a.coords);
    set_opt(&mut cfg.out, a.out);
    set(&mut cfg.shape, a.shape);
    set(&mut cfg.voxel_size_um, a.voxel_size);
    set(&mut cfg.kernel.sigma_um, a.sigma);
    set(&mut cfg.kernel.cutoff_um, a.cutoff);
    if let Some(s) = a.compounding {
        cfg.kernel.compounding = named("compounding", &s)?;
    }
    if let Some(s) = a.amplitude {
        cfg.kernel.amplitude = named("amplitude", &s)?;
    }
    distinct_paths(&[&cfg.coords, &cfg.out])?;
    let coords_path = required(&cfg.coords, "coords")?;
    let out = required(&cfg.out, "out")?;
    let coords = CoordSet::load(coords_path)?;
    render_dm(&coords, cfg.shape, cfg.voxel_size_um, &cfg.kernel)?.save(out)?;
    Ok(())
}

fn run_detect(a: DetectArgs) -> CliResult<()> {
    let mut cfg = layered(DetectRun::default(), a.config.as_deref())?;
    set_opt(&mut cfg.dm, a.dm);
    set_opt(&mut cfg.out, a.out);
    set(&mut cfg.nms.threshold, a.threshold);
    set(&mut cfg.nms.min_distance_um, a.min_distance);
    if a.tile.is_some() || a.conv_margin.is_some() || a.peak_margin.is_some() || a.strategy.is_some() {
        let t = cfg.tiling.get_or_insert_with(TilingConfig::default);
        set(&mut t.l_in, a.tile);
        set(&mut t.conv_margin, a.conv_margin);
        set(&mut t.peak_margin, a.peak_margin);
        if let Some(s) = a.strategy {
            t.strategy = named("strategy", &s)?;
        }
    }
    distinct_paths(&[&cfg.dm, &cfg.out])?;
    let dm_path = required(&cfg.dm, "dm")?;
    let out = required(&cfg.out, "out")?;
    let dm = Volume3D::load(dm_path)?;
    let peaks = match &cfg.tiling {
        Some(t) => plan_and_detect(&dm, t, &cfg.nms)?,
        None => detect_peaks(&dm, &cfg.nms)?,
    };
    peaks.save(out)?;
    Ok(())
}

fn run_features(a: FeaturesArgs) -> CliResult<()> {
    let mut cfg = layered(FeaturesRun::default(), a.config.as_deref())?;
    set_opt(&mut cfg.proposals, a.proposals);
    set_opt(&mut cfg.out, a.out);
    merge_maps(&mut cfg.maps, a.maps);
    let proposals_path = required(&cfg.proposals, "proposals")?;
    let out = required(&cfg.out, "out")?;
    let maps = load_maps(&cfg.maps)?;
    let proposals = CoordSet::load(proposals_path)?;
    let x = extract_features(&map_refs(&maps), &proposals, &cfg.features)?;
    let kinds: Vec<MapKind> = maps.iter().map(|m| m.0).collect();
    x.write_csv(&cfg.features.column_names(&kinds), std::io::BufWriter::new(std::fs::File::create(out)?))?;
    Ok(())
}

fn run_train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = layered(TrainRun::default(), a.config.as_deref())?;
    set_opt(&mut cfg.proposals, a.proposals);
    set_opt(&mut cfg.gt, a.gt);
    set_opt(&mut cfg.out, a.out);
    merge_maps(&mut cfg.maps, a.maps);
    if let Some(s) = a.kind {
        cfg.classifier = named("kind", &s)?;
    }
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.forest.n_trees, a.n_trees);
    set(&mut cfg.mlp.epochs, a.epochs);
    set(&mut cfg.t_match_um, a.t_match);
    cfg.forest.seed = cfg.seed;
    cfg.mlp.seed = cfg.seed;
    let proposals_path = required(&cfg.proposals, "proposals")?;
    let gt_path = required(&cfg.gt, "gt")?;
    let out = required(&cfg.out, "out")?;
    let maps = load_maps(&cfg.maps)?;
    let proposals = CoordSet::load(proposals_path)?;
    let gt = CoordSet::load(gt_path)?;
    let report = score_detection(&gt, &proposals, cfg.t_match_um)?;
    let mut labels = vec![0u8; proposals.len()];
    for p in &report.pairs {
        labels[p.pred] = 1;
    }
    let x = extract_features(&map_refs(&maps), &proposals, &cfg.features)?;
    let model = match cfg.classifier {
        ClassifierKind::Forest => Model::Forest(train_forest(&x, &labels, &cfg.forest)?),
        ClassifierKind::Mlp => Model::Mlp(train_mlp(&x, &labels, &cfg.mlp)?),
    };
    let kinds = maps.iter().map(|m| m.0).collect();
    Classifier::new(kinds, cfg.features.clone(), model)?.save(out)?;
    Ok(())
}

fn run_classify(a: ClassifyArgs) -> CliResult<()> {
    let mut cfg = layered(ClassifyRun::default(), a.config.as_deref())?;
    set_opt(&mut cfg.model, a.model);
    set_opt(&mut cfg.proposals, a.proposals);
    set_opt(&mut cfg.out, a.out);
    merge_maps(&mut cfg.maps, a.maps);
    distinct_paths(&[&cfg.proposals, &cfg.out])?;
    let model_path = required(&cfg.model, "model")?;
    let proposals_path = required(&cfg.proposals, "proposals")?;
    let out = required(&cfg.out, "out")?;
    let maps = load_maps(&cfg.maps)?;
    let model = Classifier::load(model_path)?;
    let proposals = CoordSet::load(proposals_path)?;
    classify_proposals(&model, &map_refs(&maps), &proposals)?.save(out)?;
    Ok(())
}

/// Counts come from predictions with `p >= 0.5` when a probability column is
/// present; Brier and NLL always score every prediction.
#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub t_match_um: f64,
    pub probabilistic: bool,
    pub summary: DetectionSummary,
    pub matching: MatchReport,
}

fn run_eval(a: EvalArgs) -> CliResult<()> {
    let mut cfg = layered(EvalRun::default(), a.config.as_deref())?;
    set_opt(&mut cfg.gt, a.gt);
    set_opt(&mut cfg.pred, a.pred);
    set_opt(&mut cfg.out, a.out);
    set(&mut cfg.t_match_um, a.t_match);
    let gt_path = required(&cfg.gt, "gt")?;
    let pred_path = required(&cfg.pred, "pred")?;
    let gt = CoordSet::load(gt_path)?;
    let pred = CoordSet::load(pred_path)?;
    let cal = score_detection(&gt, &pred, cfg.t_match_um)?;
    let matching =
        if pred.p.is_some() { score_detection(&gt, &positives(&pred), cfg.t_match_um)? } else { cal.clone() };
    let report = EvalReport {
        t_match_um: cfg.t_match_um,
        probabilistic: pred.p.is_some(),
        summary: DetectionSummary::new(&matching, &cal),
        matching,
    };
    write_json(&report, cfg.out.as_deref())
}

fn run_spatial(a: SpatialArgs) -> CliResult<()> {
    let mut cfg = layered(SpatialRun::default(), a.config.as_deref())?;
    set_opt(&mut cfg.cells, a.cells);
    set_opt(&mut cfg.structure, a.structure);
    set_opt(&mut cfg.tissue, a.tissue);
    set_opt(&mut cfg.out, a.out);
    set_opt(&mut cfg.curves, a.curves);
    if let Some(s) = a.mode {
        cfg.mode = named("mode", &s)?;
    }
    set(&mut cfg.spatial.seed, a.seed);
    set(&mut cfg.spatial.replicates, a.replicates);
    set(&mut cfg.spatial.adjacency_um, a.adjacency);
    distinct_paths(&[&cfg.cells, &cfg.structure, &cfg.tissue, &cfg.out, &cfg.curves])?;
    let cells_path = required(&cfg.cells, "cells")?;
    let structure_path = required(&cfg.structure, "structure")?;
    let tissue_path = required(&cfg.tissue, "tissue")?;
    let cells = CoordSet::load(cells_path)?;
    let structure = BinaryMask::load(MaskRole::Structure, structure_path)?;
    let tissue = BinaryMask::load(MaskRole::Tissue, tissue_path)?;
    cfg.spatial.validate()?;
    let ctx = SpatialContext::new(&structure, &tissue, cfg.spatial.adjacency_um)?;
    let report = match cfg.mode {
        AnalysisMode::Deterministic => ctx.analyze_deterministic(&cells, &cfg.spatial)?,
        AnalysisMode::Probabilistic => ctx.analyze_probabilistic(&cells, &cfg.spatial)?,
    };
    if let Some(p) = &cfg.curves {
        report.write_curves_csv(std::io::BufWriter::new(std::fs::File::create(p)?))?;
    }
    write_json(&report, cfg.out.as_deref())
}

fn run_pipeline_cmd(a: PipelineArgs) -> CliResult<()> {
    let base = match a.preset.as_deref() {
        None | Some("default") => PipelineConfig::default(),
        Some("tiny") => PipelineConfig::tiny(),
        Some(other) => return Err(CliError::Usage(format!("unknown preset '{other}'"))),
    };
    let mut cfg = layered(PipelineRun { out: None, pipeline: base }, a.config.as_deref())?;
    set_opt(&mut cfg.out, a.out);
    set(&mut cfg.pipeline.seed, a.seed);
    set(&mut cfg.pipeline.synth.shape, a.shape);
    set(&mut cfg.pipeline.synth.n_cells, a.n_cells);
    set(&mut cfg.pipeline.spatial.replicates, a.replicates);
    if let Some(s) = a.classifier {
        cfg.pipeline.classifier = named("classifier", &s)?;
    }
    let out = required(&cfg.out, "out")?.to_path_buf();
    let result = run_pipeline(&cfg.pipeline)?;
    result.write(&out)?;
    let r = &result.report;
    #[derive(Serialize)]
    struct Summary<'a> {
        out: &'a Path,
        n_gt: usize,
        n_proposals: usize,
        probabilistic: &'a DetectionSummary,
        deterministic: &'a DetectionSummary,
    }
    write_json(
        &Summary {
            out: &out,
            n_gt: r.n_gt,
            n_proposals: r.n_proposals,
            probabilistic: &r.probabilistic,
            deterministic: &r.deterministic,
        },
        None,
    )
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::RenderDm(a) => run_render(a),
        Command::Detect(a) => run_detect(a),
        Command::Features(a) => run_features(a),
        Command::TrainClassifier(a) => run_train(a),
        Command::Classify(a) => run_classify(a),
        Command::Eval(a) => run_eval(a),
        Command::Spatial(a) => run_spatial(a),
        Command::Pipeline(a) => run_pipeline_cmd(a),
    }
}

/// Thread count from [`THREADS_ENV`], if set.
pub fn threads_from_env() -> std::result::Result<Option<usize>, String> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(format!("{THREADS_ENV} must be a positive integer, got '{s}'")),
        },
    }
}

fn error_json(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match threads_from_env() {
        Ok(Some(n)) => {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        Ok(None) => {}
        Err(msg) => {
            eprintln!("{}", error_json("Usage", &msg));
            return 2;
        }
    }
    match run(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("{}", error_json("Usage", &msg));
            2
        }
        Err(CliError::Domain(e)) => {
            eprintln!("{}", error_json(e.kind(), &e.to_string()));
            1
        }
    }
}
