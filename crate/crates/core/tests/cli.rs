use std::path::Path;
use std::process::{Command, Output};

use probdetect::CoordSet;
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_probdetect")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn error_kind(o: &Output) -> String {
    let v: Value =
        serde_json::from_slice(&o.stderr).unwrap_or_else(|_| panic!("stderr: {}", String::from_utf8_lossy(&o.stderr)));
    v["error"]["kind"].as_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_detect_eval_chain() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    ok(&["synth", "--shape", "32,40,40", "--n-cells", "8", "--distractors", "0", "--seed", "3", "--out", s(&scene)]);
    let gt = CoordSet::load(scene.join("gt.csv")).unwrap();
    assert_eq!(gt.len(), 8);

    let gt_dm = dir.path().join("gt_dm.raw");
    ok(&["render-dm", "--coords", s(&scene.join("gt.csv")), "--shape", "32,40,40", "--out", s(&gt_dm)]);
    let found = dir.path().join("found.csv");
    ok(&["detect", "--dm", s(&gt_dm), "--threshold", "0.2", "--out", s(&found)]);

    let o = ok(&["eval", "--gt", s(&scene.join("gt.csv")), "--pred", s(&found)]);
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["summary"]["f1"], 1.0);
    assert_eq!(report["summary"]["tp"], 8);
}

#[test]
fn config_file_is_layered_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.json");
    std::fs::write(&cfg, r#"{"synth": {"shape": [24, 32, 32], "n_cells": 6, "distractors": {"count": 0}}}"#).unwrap();

    let a = dir.path().join("a");
    ok(&["synth", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(CoordSet::load(a.join("gt.csv")).unwrap().len(), 6);
    let manifest: Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest.to_string().contains("[24,32,32]"), "{manifest}");

    let b = dir.path().join("b");
    ok(&["synth", "--config", s(&cfg), "--n-cells", "4", "--out", s(&b)]);
    assert_eq!(CoordSet::load(b.join("gt.csv")).unwrap().len(), 4);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["synth", "--bogus"]).status.code(), Some(2));

    let o = run(&["eval", "--gt", "a.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_kind(&o), "Usage");

    let o = run(&["pipeline", "--preset", "huge", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(run(&["synth", "--shape", "1,2", "--out", "/tmp/never"]).status.code(), Some(2));
}

#[test]
fn domain_errors_exit_1_with_kind() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "z_um,y_um,x_um\n1,2\n").unwrap();
    let o = run(&["eval", "--gt", s(&bad), "--pred", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(["Format", "Csv"].contains(&error_kind(&o).as_str()));

    let o = run(&["eval", "--gt", s(&dir.path().join("missing.csv")), "--pred", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_kind(&o), "Io");

    let o = run(&["synth", "--shape", "8", "--n-cells", "500", "--out", s(&dir.path().join("dense"))]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_kind(&o), "PackingInfeasible");
}

#[test]
fn tiny_pipeline_reports_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = ok(&["pipeline", "--preset", "tiny", "--out", s(&a)]);
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    let prob = &summary["probabilistic"];
    assert!(prob["f1"].as_f64().unwrap() > 0.8, "{summary}");
    assert!(prob["brier"].as_f64().unwrap() < summary["deterministic"]["brier"].as_f64().unwrap() + 0.05);

    let report: Value = serde_json::from_slice(&std::fs::read(a.join("report.json")).unwrap()).unwrap();
    for key in ["probabilistic", "deterministic", "spatial_probabilistic", "spatial_deterministic", "hashes", "config"]
    {
        assert!(!report[key].is_null(), "report lacks {key}");
    }
    assert!(report["probabilistic"]["nll"].as_f64().unwrap().is_finite());

    ok(&["pipeline", "--preset", "tiny", "--out", s(&b)]);
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 5);
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n:?} differs");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for threads in ["1", "3"] {
        let d = dir.path().join(threads);
        let o = Command::new(env!("CARGO_BIN_EXE_probdetect"))
            .args(["synth", "--shape", "24,32,32", "--n-cells", "5", "--distractors", "0", "--out", s(&d)])
            .env("PROBDETECT_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success());
        outs.push(std::fs::read(d.join("dm.raw")).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn missing_inputs_are_reported_before_any_file_is_read() {
    let o = run(&[
        "classify",
        "--model",
        "/nonexistent/m.json",
        "--proposals",
        "/nonexistent/p.csv",
        "--out",
        "/tmp/never.csv",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--dm"));
}
