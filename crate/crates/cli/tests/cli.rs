//! Command-line behaviour: exit codes, planning output, fingerprints.

use std::path::PathBuf;
use std::process::{Command, Output};

fn s3dsg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s3dsg"))
        .args(args)
        .output()
        .unwrap()
}

fn scene_1() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/benchmark/scene_1")
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(s3dsg(&["consolidate"]).status.code(), Some(2));
    assert_eq!(s3dsg(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn domain_errors_exit_with_one() {
    let out = s3dsg(&["stats", "--benchmark", "/nonexistent"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let out = s3dsg(&[
        "consolidate",
        "--graph",
        scene_1().join("base_graph.json").to_str().unwrap(),
        "--out",
        dir.path().join("g.json").to_str().unwrap(),
        "--tau",
        "1.5",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn fingerprint_ignores_whitespace_layout() {
    let a = s3dsg(&[
        "fingerprint",
        "--prompt",
        "Describe  the\nscene",
        "--image-ref",
        "x.png",
    ]);
    let b = s3dsg(&[
        "fingerprint",
        "--prompt",
        "Describe the scene",
        "--image-ref",
        "x.png",
    ]);
    let c = s3dsg(&[
        "fingerprint",
        "--prompt",
        "Describe the scene",
        "--image-ref",
        "y.png",
    ]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    assert_eq!(String::from_utf8(a.stdout).unwrap().trim().len(), 64);
}

#[test]
fn plan_writes_report_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let (json, svg) = (dir.path().join("plan.json"), dir.path().join("plan.svg"));
    let graph = scene_1().join("base_graph.json");
    let text = std::fs::read_to_string(&graph).unwrap();
    let g: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(g["nodes"].as_array().is_some_and(|n| !n.is_empty()));
    let out = s3dsg(&[
        "plan",
        "--graph",
        graph.to_str().unwrap(),
        "--start",
        "0.5,0.5",
        "--goal",
        "3.0,2.5",
        "--out",
        json.to_str().unwrap(),
        "--svg",
        svg.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let social = report["social"]["length"].as_f64().unwrap();
    let baseline = report["baseline"]["length"].as_f64().unwrap();
    assert!(social >= baseline - 1e-9);
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}
