//! C ABI for probdetect.
//!
//! Objects cross the boundary as opaque handles created by `pd_*_new` or
//! `pd_*_load` and released with the matching `pd_*_free`. Every fallible
//! call returns a [`PdStatus`]; on failure the message is available from
//! [`pd_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use probdetect::classifier::{classify_proposals, Classifier};
use probdetect::coords::CoordSet;
use probdetect::densitymap::{render_dm, Compounding, KernelSpec};
use probdetect::detect::{detect_peaks, NmsConfig};
use probdetect::error::Error;
use probdetect::evalmetrics::{brier_nll, calibration_terms, score_detection};
use probdetect::features::MapKind;
use probdetect::pipeline::{run_pipeline, PipelineConfig};
use probdetect::volume::Volume3D;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    ShapeMismatch = 5,
    DimensionMismatch = 6,
    ConstantVolume = 7,
    VolumeTooSmall = 8,
    EmptyWindow = 9,
    NonPositiveAleatoric = 10,
    EmptyCells = 11,
    Domain = 12,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdCompounding {
    Max = 0,
    Sum = 1,
}

/// Detection counts and calibration scores of one prediction set.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PdScore {
    pub n_tp: usize,
    pub n_fp: usize,
    pub n_fn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub brier: f64,
    pub nll: f64,
}

pub struct PdVolume(Volume3D);
pub struct PdCoords(CoordSet);
pub struct PdClassifier(Classifier);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PdStatus {
    match e {
        Error::Io(_) => PdStatus::Io,
        Error::Format(_) | Error::Json(_) | Error::Csv(_) => PdStatus::Format,
        Error::InvalidConfig(_) => PdStatus::InvalidArgument,
        Error::ShapeMismatch(..) => PdStatus::ShapeMismatch,
        Error::DimensionMismatch { .. } => PdStatus::DimensionMismatch,
        Error::ConstantVolume => PdStatus::ConstantVolume,
        Error::VolumeTooSmall { .. } => PdStatus::VolumeTooSmall,
        Error::EmptyWindow { .. } => PdStatus::EmptyWindow,
        Error::NonPositiveAleatoric { .. } => PdStatus::NonPositiveAleatoric,
        Error::EmptyCells => PdStatus::EmptyCells,
        _ => PdStatus::Domain,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PdStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            PdStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            PdStatus::InvalidArgument
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(format!("{}: {e}", e.kind()));
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            PdStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn triple<T: Copy>(p: *const T, what: &'static str) -> Result<[T; 3], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok([*p, *p.add(1), *p.add(2)])
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail::Arg("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---- volumes ----

/// Copy `nz*ny*nx` floats (C-order) into a new volume.
///
/// # Safety
/// `shape` and `voxel_size_um` point to 3 values, `data` to the product of `shape`.
#[no_mangle]
pub unsafe extern "C" fn pd_volume_new(
    shape: *const usize,
    voxel_size_um: *const f64,
    data: *const f32,
    out_volume: *mut *mut PdVolume,
) -> PdStatus {
    guard(|| {
        let shape = triple(shape, "shape")?;
        let vs = triple(voxel_size_um, "voxel_size_um")?;
        let slot = out(out_volume, "out_volume")?;
        if data.is_null() {
            return Err(Fail::Null("data"));
        }
        let n = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or(Fail::Arg("shape overflows".into()))?;
        let v = Volume3D::from_vec(shape, vs, std::slice::from_raw_parts(data, n).to_vec())?;
        *slot = boxed(PdVolume(v));
        Ok(())
    })
}

/// Read a raw volume and its JSON sidecar.
///
/// # Safety
/// `path` is a NUL-terminated string; `out_volume` is writable.
#[no_mangle]
pub unsafe extern "C" fn pd_volume_load(path_: *const c_char, out_volume: *mut *mut PdVolume) -> PdStatus {
    guard(|| {
        let p = path(path_)?;
        let slot = out(out_volume, "out_volume")?;
        *slot = boxed(PdVolume(Volume3D::load(p)?));
        Ok(())
    })
}

/// # Safety
/// `volume` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pd_volume_save(volume: *const PdVolume, path_: *const c_char) -> PdStatus {
    guard(|| {
        let v = as_ref(volume, "volume")?;
        v.0.save(path(path_)?)?;
        Ok(())
    })
}

/// Write the shape into `out_shape[3]` and voxel size into `out_voxel_size_um[3]`.
/// Either output may be NULL.
///
/// # Safety
/// `volume` is a live handle; non-null outputs hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn pd_volume_shape(
    volume: *const PdVolume,
    out_shape: *mut usize,
    out_voxel_size_um: *mut f64,
) -> PdStatus {
    guard(|| {
        let v = as_ref(volume, "volume")?;
        for k in 0..3 {
            if !out_shape.is_null() {
                *out_shape.add(k) = v.0.shape()[k];
            }
            if !out_voxel_size_um.is_null() {
                *out_voxel_size_um.add(k) = v.0.voxel_size()[k];
            }
        }
        Ok(())
    })
}

/// Borrowed pointer to the voxel data, valid while the handle lives.
///
/// # Safety
/// `volume` is a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn pd_volume_data(volume: *const PdVolume) -> *const f32 {
    volume.as_ref().map_or(ptr::null(), |v| v.0.data().as_ptr())
}

/// # Safety
/// `volume` was returned by this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pd_volume_free(volume: *mut PdVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

// ---- coordinate sets ----

/// Copy `n` points (`points[3*i..3*i+3]` = z, y, x in um) and optional
/// probabilities into a new set.
///
/// # Safety
/// `points` holds `3*n` values; `p` is NULL or holds `n` values.
#[no_mangle]
pub unsafe extern "C" fn pd_coords_new(
    points: *const f64,
    p: *const f64,
    n: usize,
    out_coords: *mut *mut PdCoords,
) -> PdStatus {
    guard(|| {
        let slot = out(out_coords, "out_coords")?;
        if points.is_null() && n > 0 {
            return Err(Fail::Null("points"));
        }
        let pts: Vec<[f64; 3]> =
            (0..n).map(|i| [*points.add(3 * i), *points.add(3 * i + 1), *points.add(3 * i + 2)]).collect();
        let c = if p.is_null() {
            CoordSet::new(pts)
        } else {
            let probs = std::slice::from_raw_parts(p, n).to_vec();
            if probs.iter().any(|q| !(0.0..=1.0).contains(q)) {
                return Err(Fail::Arg("probabilities must lie in [0, 1]".into()));
            }
            CoordSet::with_p(pts, probs)
        };
        *slot = boxed(PdCoords(c));
        Ok(())
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out_coords` is writable.
#[no_mangle]
pub unsafe extern "C" fn pd_coords_load(path_: *const c_char, out_coords: *mut *mut PdCoords) -> PdStatus {
    guard(|| {
        let p = path(path_)?;
        let slot = out(out_coords, "out_coords")?;
        *slot = boxed(PdCoords(CoordSet::load(p)?));
        Ok(())
    })
}

/// # Safety
/// `coords` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pd_coords_save(coords: *const PdCoords, path_: *const c_char) -> PdStatus {
    guard(|| {
        let c = as_ref(coords, "coords")?;
        c.0.save(path(path_)?)?;
        Ok(())
    })
}

/// Number of points, 0 for NULL.
///
/// # Safety
/// `coords` is a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn pd_coords_len(coords: *const PdCoords) -> usize {
    coords.as_ref().map_or(0, |c| c.0.len())
}

/// Point `i` into `out_zyx[3]` and its probability (1 when absent) into `out_p`.
/// `out_p` may be NULL.
///
/// # Safety
/// `coords` is a live handle; `out_zyx` holds 3 values.
#[no_mangle]
pub unsafe extern "C" fn pd_coords_get(
    coords: *const PdCoords,
    i: usize,
    out_zyx: *mut f64,
    out_p: *mut f64,
) -> PdStatus {
    guard(|| {
        let c = as_ref(coords, "coords")?;
        if out_zyx.is_null() {
            return Err(Fail::Null("out_zyx"));
        }
        if i >= c.0.len() {
            return Err(Fail::Arg(format!("index {i} out of range for {} points", c.0.len())));
        }
        for k in 0..3 {
            *out_zyx.add(k) = c.0.points[i][k];
        }
        if !out_p.is_null() {
            *out_p = c.0.prob(i);
        }
        Ok(())
    })
}

/// # Safety
/// `coords` was returned by this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pd_coords_free(coords: *mut PdCoords) {
    if !coords.is_null() {
        drop(Box::from_raw(coords));
    }
}

// ---- density maps and detection ----

/// Render a density map with the default kernel cutoff and unit-peak amplitude.
///
/// # Safety
/// `coords` is a live handle; `shape` and `voxel_size_um` hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn pd_render_dm(
    coords: *const PdCoords,
    shape: *const usize,
    voxel_size_um: *const f64,
    sigma_um: f64,
    compounding: PdCompounding,
    out_volume: *mut *mut PdVolume,
) -> PdStatus {
    guard(|| {
        let c = as_ref(coords, "coords")?;
        let shape = triple(shape, "shape")?;
        let vs = triple(voxel_size_um, "voxel_size_um")?;
        let slot = out(out_volume, "out_volume")?;
        let comp = match compounding {
            PdCompounding::Max => Compounding::Max,
            PdCompounding::Sum => Compounding::Sum,
        };
        *slot = boxed(PdVolume(render_dm(&c.0, shape, vs, &KernelSpec::new(sigma_um, comp))?));
        Ok(())
    })
}

/// Local maxima above `threshold` after greedy suppression within `min_distance_um`.
///
/// # Safety
/// `volume` is a live handle; `out_coords` is writable.
#[no_mangle]
pub unsafe extern "C" fn pd_detect_peaks(
    volume: *const PdVolume,
    threshold: f64,
    min_distance_um: f64,
    out_coords: *mut *mut PdCoords,
) -> PdStatus {
    guard(|| {
        let v = as_ref(volume, "volume")?;
        let slot = out(out_coords, "out_coords")?;
        let cfg = NmsConfig { min_distance_um, threshold };
        *slot = boxed(PdCoords(detect_peaks(&v.0, &cfg)?));
        Ok(())
    })
}

// ---- classification ----

/// # Safety
/// `path` is a NUL-terminated string; `out_model` is writable.
#[no_mangle]
pub unsafe extern "C" fn pd_classifier_load(path_: *const c_char, out_model: *mut *mut PdClassifier) -> PdStatus {
    guard(|| {
        let p = path(path_)?;
        let slot = out(out_model, "out_model")?;
        *slot = boxed(PdClassifier(Classifier::load(p)?));
        Ok(())
    })
}

/// Attach a probability to each proposal. Maps the model was not trained on
/// may be NULL.
///
/// # Safety
/// `model`, `dm` and `proposals` are live handles; the other maps are live or NULL.
#[no_mangle]
pub unsafe extern "C" fn pd_classify(
    model: *const PdClassifier,
    dm: *const PdVolume,
    aleatoric: *const PdVolume,
    epistemic: *const PdVolume,
    proposals: *const PdCoords,
    out_coords: *mut *mut PdCoords,
) -> PdStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        let props = as_ref(proposals, "proposals")?;
        let slot = out(out_coords, "out_coords")?;
        let mut maps = vec![(MapKind::Dm, &as_ref(dm, "dm")?.0)];
        if let Some(a) = aleatoric.as_ref() {
            maps.push((MapKind::Aleatoric, &a.0));
        }
        if let Some(e) = epistemic.as_ref() {
            maps.push((MapKind::Epistemic, &e.0));
        }
        *slot = boxed(PdCoords(classify_proposals(&m.0, &maps, &props.0)?));
        Ok(())
    })
}

/// # Safety
/// `model` was returned by this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pd_classifier_free(model: *mut PdClassifier) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

// ---- evaluation ----

/// Match `pred` to `gt` within `t_match_um` and score counts and calibration.
/// Predictions without probabilities count as certain.
///
/// # Safety
/// `gt` and `pred` are live handles; `out_score` is writable.
#[no_mangle]
pub unsafe extern "C" fn pd_score(
    gt: *const PdCoords,
    pred: *const PdCoords,
    t_match_um: f64,
    out_score: *mut PdScore,
) -> PdStatus {
    guard(|| {
        let g = as_ref(gt, "gt")?;
        let p = as_ref(pred, "pred")?;
        let slot = out(out_score, "out_score")?;
        let r = score_detection(&g.0, &p.0, t_match_um)?;
        let cal = brier_nll(&calibration_terms(&g.0, &p.0, &r));
        *slot = PdScore {
            n_tp: r.tp,
            n_fp: r.fp,
            n_fn: r.fn_,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            brier: cal.brier,
            nll: cal.nll,
        };
        Ok(())
    })
}

// ---- pipeline ----

/// Run the synthetic end-to-end pipeline and write its outputs to `out_dir`.
/// `config_json` may be NULL for the default configuration; otherwise it is
/// a complete or partial configuration whose fields override the defaults.
///
/// # Safety
/// `config_json` is NULL or NUL-terminated; `out_dir` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pd_pipeline_run(config_json: *const c_char, out_dir: *const c_char) -> PdStatus {
    guard(|| {
        let dir = path(out_dir)?;
        let cfg = if config_json.is_null() {
            PipelineConfig::default()
        } else {
            let s = CStr::from_ptr(config_json).to_str().map_err(|_| Fail::Arg("config is not valid UTF-8".into()))?;
            let patch: serde_json::Value = serde_json::from_str(s).map_err(Error::from)?;
            let mut base = serde_json::to_value(PipelineConfig::default()).map_err(Error::from)?;
            merge(&mut base, patch);
            serde_json::from_value(base).map_err(Error::from)?
        };
        cfg.validate()?;
        run_pipeline(&cfg)?.write(dir)?;
        Ok(())
    })
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}
