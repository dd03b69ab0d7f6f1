use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use survborrow::estimator::EstimatorOptions;
use survborrow::{estimate, load_dataset, EstimatorKind};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_survborrow")).args(args).output().expect("binary runs")
}

fn simulate_to(dir: &Path, extra: &[&str]) -> std::path::PathBuf {
    let path = dir.join("data.csv");
    let mut args = vec!["simulate", "--setting", "1", "--n-trial", "300", "--n-external", "200", "--n-treated", "150", "--seed", "11"];
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--out", path.to_str().unwrap()]);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path
}

#[test]
fn help_lists_subcommands() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["simulate", "estimate", "benchmark", "prss"] {
        assert!(text.contains(sub), "missing {sub} in help");
    }
}

#[test]
fn simulate_then_estimate_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_to(dir.path(), &[]);
    let report_path = dir.path().join("report.json");
    let influence = dir.path().join("influence.csv");
    let selection = dir.path().join("selection.csv");
    let out = run(&[
        "estimate",
        "--input",
        data.to_str().unwrap(),
        "--tau",
        "2",
        "--kind",
        "adapt",
        "--bootstrap",
        "5",
        "--seed",
        "4",
        "--influence",
        influence.to_str().unwrap(),
        "--selection",
        selection.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    let dataset = load_dataset(fs::File::open(&data).unwrap(), 3).unwrap();
    let options = EstimatorOptions { bootstrap: 5, ..Default::default() };
    let want = estimate(&dataset, EstimatorKind::Adapt, 2.0, &options, 4).unwrap();
    assert_eq!(json["theta_hat"].as_f64().unwrap(), want.theta_hat);
    assert_eq!(json["se"].as_f64().unwrap(), want.se);
    assert_eq!(json["n_borrowed"].as_u64().unwrap(), want.n_borrowed as u64);

    let rows = fs::read_to_string(&influence).unwrap();
    assert!(rows.starts_with("id,phi1,phi0_full,phi0_rct,phi0_sel,psi\n"));
    assert_eq!(rows.lines().count(), dataset.len() + 1);
    assert!(fs::metadata(&selection).unwrap().len() > 0);
}

#[test]
fn estimate_reads_stdin() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_to(dir.path(), &[]);
    let out = Command::new(env!("CARGO_BIN_EXE_survborrow"))
        .args(["estimate", "--tau", "2", "--kind", "aipw", "--bootstrap", "2"])
        .stdin(fs::File::open(&data).unwrap())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["kind"], "aipw");
    assert!(json["theta_hat"].as_f64().unwrap().is_finite());
}

#[test]
fn usage_errors_exit_two() {
    let out = run(&["estimate", "--tau", "2", "--kind", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["simulate", "--setting", "9"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one() {
    let out = run(&["estimate", "--input", "/nonexistent/data.csv", "--tau", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "id,y,delta,a,r,x1,x2,x3\n1,1.0,1,1,0,0,0,0\n").unwrap();
    let out = run(&["estimate", "--input", bad.to_str().unwrap(), "--tau", "2"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn benchmark_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("bench");
    let out = run(&[
        "benchmark",
        "--setting",
        "1",
        "--n-treated",
        "100",
        "--n-external",
        "150",
        "--n0",
        "100",
        "--replications",
        "2",
        "--bootstrap",
        "3",
        "--truth-draws",
        "100000",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "setting,estimator,n0,bias,se,rmse,coverage,type1,power,borrow_frac,rel_ci_width");
    assert_eq!(lines.count(), 3);
    let reps: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("replications.json")).unwrap()).unwrap();
    assert_eq!(reps.as_array().unwrap().len(), 2);
}

#[test]
fn prss_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_to(dir.path(), &[]);
    let out = run(&[
        "prss",
        "--input",
        data.to_str().unwrap(),
        "--sizes",
        "60,100",
        "--repeats",
        "2",
        "--thresholds=-0.1,0",
        "--bootstrap",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    // One row per (size, tau, threshold).
    assert_eq!(text.lines().count(), 1 + 2 * 2);

    let out = run(&["prss", "--input", data.to_str().unwrap(), "--sizes", "10000", "--repeats", "1"]);
    assert_eq!(out.status.code(), Some(1));
}
