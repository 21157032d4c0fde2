use std::ffi::{CStr, CString};
use std::ptr;

use probdetect_ffi::*;

fn last_error() -> String {
    let p = pd_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cstr(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn render_detect_score_roundtrip() {
    unsafe {
        let pts = [16.5, 16.5, 10.5, 16.5, 16.5, 22.5];
        let mut cells = ptr::null_mut();
        assert_eq!(pd_coords_new(pts.as_ptr(), ptr::null(), 2, &mut cells), PdStatus::Ok);
        assert_eq!(pd_coords_len(cells), 2);

        let shape = [32usize; 3];
        let vs = [1.0f64; 3];
        let mut dm = ptr::null_mut();
        assert_eq!(pd_render_dm(cells, shape.as_ptr(), vs.as_ptr(), 2.0, PdCompounding::Max, &mut dm), PdStatus::Ok);
        let mut got_shape = [0usize; 3];
        assert_eq!(pd_volume_shape(dm, got_shape.as_mut_ptr(), ptr::null_mut()), PdStatus::Ok);
        assert_eq!(got_shape, shape);
        let data = std::slice::from_raw_parts(pd_volume_data(dm), 32 * 32 * 32);
        assert!((data[(16 * 32 + 16) * 32 + 10] - 1.0).abs() < 1e-6);

        let mut found = ptr::null_mut();
        assert_eq!(pd_detect_peaks(dm, 0.1, 4.0, &mut found), PdStatus::Ok);
        assert_eq!(pd_coords_len(found), 2);
        let mut zyx = [0.0; 3];
        let mut p = 0.0;
        assert_eq!(pd_coords_get(found, 0, zyx.as_mut_ptr(), &mut p), PdStatus::Ok);
        assert_eq!(p, 1.0);

        let mut score = PdScore::default();
        assert_eq!(pd_score(cells, found, 4.0, &mut score), PdStatus::Ok);
        assert_eq!((score.n_tp, score.n_fp, score.n_fn), (2, 0, 0));
        assert_eq!(score.f1, 1.0);

        pd_coords_free(found);
        pd_volume_free(dm);
        pd_coords_free(cells);
    }
}

#[test]
fn probabilities_enter_calibration() {
    unsafe {
        let gt_pts = [5.0, 5.0, 5.0];
        let pred_pts = [5.0, 5.0, 5.0, 20.0, 20.0, 20.0];
        let probs = [0.5, 0.5];
        let (mut gt, mut pred) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(pd_coords_new(gt_pts.as_ptr(), ptr::null(), 1, &mut gt), PdStatus::Ok);
        assert_eq!(pd_coords_new(pred_pts.as_ptr(), probs.as_ptr(), 2, &mut pred), PdStatus::Ok);
        let mut s = PdScore::default();
        assert_eq!(pd_score(gt, pred, 4.0, &mut s), PdStatus::Ok);
        assert!((s.brier - 0.25).abs() < 1e-12);
        assert!((s.nll - std::f64::consts::LN_2).abs() < 1e-12);
        pd_coords_free(gt);
        pd_coords_free(pred);
    }
}

#[test]
fn errors_carry_status_and_message() {
    unsafe {
        let mut v = ptr::null_mut();
        let vs = [1.0; 3];
        let data = [0.0f32; 8];
        assert_eq!(pd_volume_new(ptr::null(), vs.as_ptr(), data.as_ptr(), &mut v), PdStatus::NullPointer);
        assert!(last_error().contains("shape"));

        let shape = [2usize; 3];
        assert_eq!(pd_volume_new(shape.as_ptr(), vs.as_ptr(), data.as_ptr(), ptr::null_mut()), PdStatus::NullPointer);

        let bad = [0.0, 0.0, 0.0];
        let p = [1.5];
        let mut c = ptr::null_mut();
        assert_eq!(pd_coords_new(bad.as_ptr(), p.as_ptr(), 1, &mut c), PdStatus::InvalidArgument);
        assert!(c.is_null());

        assert_eq!(pd_coords_new(bad.as_ptr(), ptr::null(), 1, &mut c), PdStatus::Ok);
        let mut zyx = [0.0; 3];
        assert_eq!(pd_coords_get(c, 3, zyx.as_mut_ptr(), ptr::null_mut()), PdStatus::InvalidArgument);
        assert!(last_error().contains("out of range"));
        pd_coords_free(c);

        let missing = CString::new("/nonexistent/probdetect/volume.raw").unwrap();
        assert_eq!(pd_volume_load(missing.as_ptr(), &mut v), PdStatus::Io);
        assert!(last_error().starts_with("Io"));

        let mut s = PdScore::default();
        assert_eq!(pd_score(ptr::null(), ptr::null(), 4.0, &mut s), PdStatus::NullPointer);
    }
}

#[test]
fn free_accepts_null() {
    unsafe {
        pd_volume_free(ptr::null_mut());
        pd_coords_free(ptr::null_mut());
        pd_classifier_free(ptr::null_mut());
        assert_eq!(pd_coords_len(ptr::null()), 0);
        assert!(pd_volume_data(ptr::null()).is_null());
    }
    let v = unsafe { CStr::from_ptr(pd_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let shape = [2usize, 3, 4];
        let vs = [2.0, 1.0, 1.0];
        let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.5).collect();
        let mut v = ptr::null_mut();
        assert_eq!(pd_volume_new(shape.as_ptr(), vs.as_ptr(), data.as_ptr(), &mut v), PdStatus::Ok);
        let vp = cstr(&dir.path().join("v.raw"));
        assert_eq!(pd_volume_save(v, vp.as_ptr()), PdStatus::Ok);
        let mut w = ptr::null_mut();
        assert_eq!(pd_volume_load(vp.as_ptr(), &mut w), PdStatus::Ok);
        let mut got_vs = [0.0; 3];
        assert_eq!(pd_volume_shape(w, ptr::null_mut(), got_vs.as_mut_ptr()), PdStatus::Ok);
        assert_eq!(got_vs, vs);
        assert_eq!(std::slice::from_raw_parts(pd_volume_data(w), 24), &data[..]);
        pd_volume_free(v);
        pd_volume_free(w);

        let pts = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let probs = [0.25, 0.75];
        let mut c = ptr::null_mut();
        assert_eq!(pd_coords_new(pts.as_ptr(), probs.as_ptr(), 2, &mut c), PdStatus::Ok);
        let cp = cstr(&dir.path().join("c.csv"));
        assert_eq!(pd_coords_save(c, cp.as_ptr()), PdStatus::Ok);
        let mut d = ptr::null_mut();
        assert_eq!(pd_coords_load(cp.as_ptr(), &mut d), PdStatus::Ok);
        let mut zyx = [0.0; 3];
        let mut p = 0.0;
        assert_eq!(pd_coords_get(d, 1, zyx.as_mut_ptr(), &mut p), PdStatus::Ok);
        assert_eq!((zyx, p), ([4.0, 5.0, 6.0], 0.75));
        pd_coords_free(c);
        pd_coords_free(d);
    }
}

#[test]
fn pipeline_then_classify() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CString::new(
        r#"{"synth":{"shape":[48,64,64],"n_cells":40,"distractors":{"count":15}},
            "tiling":{"l_in":[32,40,40],"conv_margin":[6,6,6],"peak_margin":[4,4,4],"strategy":"M_peak"},
            "forest":{"n_trees":32},"spatial":{"replicates":5}}"#,
    )
    .unwrap();
    let out = cstr(dir.path());
    let st = unsafe { pd_pipeline_run(cfg.as_ptr(), out.as_ptr()) };
    assert_eq!(st, PdStatus::Ok, "{}", if st == PdStatus::Ok { String::new() } else { last_error() });

    unsafe {
        let load = |name: &str| {
            let mut v = ptr::null_mut();
            assert_eq!(pd_volume_load(cstr(&dir.path().join(name)).as_ptr(), &mut v), PdStatus::Ok, "{name}");
            v
        };
        let (dm, al, ep) = (load("dm.raw"), load("aleatoric.raw"), load("epistemic.raw"));
        let mut model = ptr::null_mut();
        assert_eq!(pd_classifier_load(cstr(&dir.path().join("model.json")).as_ptr(), &mut model), PdStatus::Ok);
        let mut props = ptr::null_mut();
        assert_eq!(pd_coords_load(cstr(&dir.path().join("proposals.csv")).as_ptr(), &mut props), PdStatus::Ok);
        let mut classified = ptr::null_mut();
        assert_eq!(pd_classify(model, dm, al, ep, props, &mut classified), PdStatus::Ok, "{}", last_error());
        assert_eq!(pd_coords_len(classified), pd_coords_len(props));
        let mut zyx = [0.0; 3];
        let mut p = -1.0;
        assert_eq!(pd_coords_get(classified, 0, zyx.as_mut_ptr(), &mut p), PdStatus::Ok);
        assert!((0.0..=1.0).contains(&p));

        let bad = CString::new("{\"synth\":{\"n_cells\":\"many\"}}").unwrap();
        assert_eq!(pd_pipeline_run(bad.as_ptr(), out.as_ptr()), PdStatus::Format);

        for p in [props, classified] {
            pd_coords_free(p);
        }
        pd_classifier_free(model);
        for v in [dm, al, ep] {
            pd_volume_free(v);
        }
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/probdetect.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in ["pd_volume_new", "pd_detect_peaks", "pd_score", "pd_last_error", "pd_pipeline_run"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let Ok(out) =
        std::process::Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header]).output()
    else {
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
