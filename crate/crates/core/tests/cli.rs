use std::path::Path;
use std::process::{Command, Output};

fn semba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semba")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(out: &Path, scene: &str, frames: usize, seed: u64) {
    let o = semba(&[
        "simulate",
        "--scene",
        scene,
        "--frames",
        &frames.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

fn refine(data: &Path, out: &Path, report: &Path, extra: &[&str]) -> Output {
    let (velo, labels, priors) = (data.join("velodyne"), data.join("labels"), data.join("poses.txt"));
    let mut args = vec!["refine", "--scans", s(&velo), "--labels", s(&labels)];
    args.extend(["--priors", s(&priors), "--output", s(out), "--report", s(report)]);
    args.extend(extra);
    semba(&args)
}

#[test]
fn evaluate_identical_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "ground-only", 4, 0);
    let gt = dir.path().join("ground_truth.txt");
    let json = dir.path().join("ate.json");
    let o = semba(&["evaluate", s(&gt), s(&gt), "--json", s(&json)]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["schema"], 1);
    assert!(v["ate"]["rmse"].as_f64().unwrap() < 1e-9);
    assert_eq!(v["ate"]["alignment"], "rigid");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "ground-only", 3, 0);
    let missing = dir.path().join("missing_priors.txt");
    let o = semba(&[
        "refine",
        "--scans",
        s(&dir.path().join("velodyne")),
        "--labels",
        s(&dir.path().join("labels")),
        "--priors",
        s(&missing),
        "--output",
        s(&dir.path().join("out.txt")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing_priors.txt"));

    assert_eq!(semba(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(semba(&["evaluate", "a", "b", "--bogus"]).status.code(), Some(2));
    assert_eq!(semba(&["simulate", "--scene", "moon", "--out", s(dir.path())]).status.code(), Some(1));
    let gt = dir.path().join("ground_truth.txt");
    assert_eq!(semba(&["evaluate", s(&gt), s(&gt), "--align", "sim3"]).status.code(), Some(1));
}

#[test]
fn ground_only_refine_passes_priors_through() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "ground-only", 10, 1);
    let out = dir.path().join("refined.txt");
    let report = dir.path().join("report.json");
    let traces = dir.path().join("traces");
    let o = refine(dir.path(), &out, &report, &["--trace-dir", s(&traces)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let priors = semba::cloud_io::read_poses(&dir.path().join("poses.txt")).unwrap();
    let refined = semba::cloud_io::read_poses(&out).unwrap();
    assert_eq!(priors, refined);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["n_degenerate"], v["n_windows"]);
    assert_eq!(v["per_window"][0]["verdict"], "degenerate-unchanged");
    assert!(traces.join("window_000_selection.csv").exists());
    assert!(traces.join("window_000_ecm.csv").exists());
}

#[test]
fn refine_with_truth_reports_ate() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "urban-block", 10, 2);
    let out = dir.path().join("refined.txt");
    let report = dir.path().join("report.json");
    let gt = dir.path().join("ground_truth.txt");
    let o = refine(dir.path(), &out, &report, &["--truth", s(&gt)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["per_window"][0]["verdict"], "refined");
    assert!(v["ate_rmse"].as_f64().is_some());
    assert!(v["per_window"][0]["kappa"].as_f64().unwrap() < 100.0);
}

#[test]
fn inspect_gmm_writes_both_dumps() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "urban-block", 3, 0);
    let json = dir.path().join("gmm.json");
    let ply = dir.path().join("gmm.ply");
    let o = semba(&[
        "inspect-gmm",
        "--scans",
        s(&dir.path().join("velodyne")),
        "--labels",
        s(&dir.path().join("labels")),
        "--poses",
        s(&dir.path().join("ground_truth.txt")),
        "--json",
        s(&json),
        "--ply",
        s(&ply),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(&ply).unwrap().starts_with("ply"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert!(v.is_object() || v.is_array());
}
