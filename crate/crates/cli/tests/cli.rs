use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dpgraph_cli::{AnalysisOutput, RunOutput};
use dpgraph_core::runtime::CSV_HEADER;

fn models() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

fn model(name: &str) -> String {
    models().join(name).display().to_string()
}

fn dpgraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpgraph")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn analyze(model_path: &str, out: &Path, methods: &str) -> AnalysisOutput {
    let o = dpgraph(&["analyze", "--model", model_path, "--methods", methods, "--out", &out.display().to_string()]);
    assert!(o.status.success(), "{}", stderr(&o));
    serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap()
}

#[test]
fn affine_rows_show_three() {
    let dir = tempfile::tempdir().unwrap();
    let a = analyze(&model("affine.json"), &dir.path().join("a.json"), "ibp,global_opt");
    assert_eq!(a.reports.len(), 2);
    for r in &a.reports {
        assert!((r.bound - 3.0).abs() < 1e-9, "{}: {}", r.method, r.bound);
        assert_eq!(r.fingerprint, a.fingerprint);
    }
    assert_eq!(a.tool_version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn mlp_gap_from_model_file() {
    let dir = tempfile::tempdir().unwrap();
    let a = analyze(&model("mlp.json"), &dir.path().join("a.json"), "ibp,global_opt");
    let (ibp, opt) = (&a.reports[0], &a.reports[1]);
    assert!(opt.bound <= 2.0);
    assert!(ibp.bound >= 100.0 * opt.bound, "ibp {} global {}", ibp.bound, opt.bound);
}

#[test]
fn table_has_one_row_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.json").display().to_string();
    let o = dpgraph(&["analyze", "--model", &model("square.json"), "--methods", "ibp,global_opt,grid_oracle", "--out", &out]);
    assert!(o.status.success());
    let table = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("method"));
    assert!(rows[2].starts_with("global_opt") && rows[2].contains("2.00000000e0"));
}

#[test]
fn default_report_path() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("affine.json");
    fs::copy(models().join("affine.json"), &m).unwrap();
    let o = dpgraph(&["analyze", "--model", &m.display().to_string()]);
    assert!(o.status.success());
    assert!(dir.path().join("affine.analysis.json").exists());
}

#[test]
fn missing_model_exits_2_and_names_path() {
    let o = dpgraph(&["analyze", "--model", "/nonexistent/model.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/model.json"));
}

#[test]
fn invalid_model_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("bad.json");
    fs::write(
        &m,
        "{\n  \"tensors\": [],\n  \"ops\": [\n    {\"name\": \"y\", \"kind\": \"Exp\", \"inputs\": [\"nope\"]}\n  ],\n  \"outputs\": [\"y\"]\n}\n",
    )
    .unwrap();
    let o = dpgraph(&["analyze", "--model", &m.display().to_string()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("bad.json") && err.contains("line 4"), "{err}");
}

#[test]
fn log_of_negative_domain_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("log.json");
    fs::write(
        &m,
        r#"{"tensors": [{"name": "x", "shape": [], "role": "private_input", "bounds": [-1, 1]}],
            "ops": [{"name": "y", "kind": "Log", "inputs": ["x"]}], "outputs": ["y"]}"#,
    )
    .unwrap();
    let o = dpgraph(&["analyze", "--model", &m.display().to_string(), "--methods", "ibp"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn unknown_method_exits_2() {
    let o = dpgraph(&["analyze", "--model", &model("affine.json"), "--methods", "magic"]);
    assert_eq!(o.status.code(), Some(2));
}

/// Runs the mean model; flags in `extra` replace the defaults.
fn run_mean(extra: &[&str]) -> Output {
    let records = model("mean_records.csv");
    let mean = model("mean.json");
    let defaults = [
        ("--model", mean.as_str()),
        ("--data", records.as_str()),
        ("--epsilon", "1"),
        ("--delta", "1e-5"),
        ("--seed", "42"),
    ];
    let mut args = vec!["run".to_string()];
    for (flag, value) in defaults {
        if !extra.contains(&flag) {
            args.push(flag.into());
            args.push(value.into());
        }
    }
    args.extend(extra.iter().map(|s| s.to_string()));
    Command::new(env!("CARGO_BIN_EXE_dpgraph")).args(&args).output().unwrap()
}

#[test]
fn run_output_schema_and_reproducibility() {
    let a = run_mean(&[]);
    let b = run_mean(&[]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let out: RunOutput = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(out.seed, 42);
    assert_eq!(out.clipped_fraction, 0.0);
    assert!((out.sensitivity - 0.1f64.sqrt()).abs() < 1e-12);
    assert_eq!(out.value[0].numel(), 1);
}

#[test]
fn cached_analysis_matches_fresh_analysis() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    analyze(&model("mean.json"), &a, "global_opt");
    let cached = run_mean(&["--analysis", &a.display().to_string()]);
    let fresh = run_mean(&[]);
    assert!(cached.status.success());
    assert_eq!(cached.stdout, fresh.stdout);
}

#[test]
fn stale_analysis_is_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    analyze(&model("affine.json"), &a, "ibp,global_opt");
    let o = run_mean(&["--analysis", &a.display().to_string()]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("another model"));
    let out: RunOutput = serde_json::from_slice(&o.stdout).unwrap();
    assert!((out.sensitivity - 0.1f64.sqrt()).abs() < 1e-12);
}

#[test]
fn out_of_bounds_records_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    fs::write(&csv, "0.5\n1.5\n-2\n0.5\n0.5\n0.5\n0.5\n0.5\n0.5\n0.5\n").unwrap();
    let o = run_mean(&["--data", &format!("x={}", csv.display())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out: RunOutput = serde_json::from_slice(&o.stdout).unwrap();
    assert!((out.clipped_fraction - 0.2).abs() < 1e-15);
}

#[test]
fn invalid_privacy_parameters_exit_4() {
    for args in [["--delta", "1.5"], ["--delta", "0"], ["--epsilon", "-1"]] {
        let o = run_mean(&args);
        assert_eq!(o.status.code(), Some(4), "{args:?}");
    }
    let dir = tempfile::tempdir().unwrap();
    let o = run_mean(&["--delta", "2", "--model", "/nonexistent.json", "--data", &dir.path().join("x").display().to_string()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn cap_refuses_large_sensitivity() {
    let o = run_mean(&["--cap", "0.1"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("sensitivity exceeds cap"));
    assert!(o.stdout.is_empty());
    assert!(run_mean(&["--cap", "1"]).status.success());
}

#[test]
fn data_shape_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    fs::write(&csv, "0.1,0.2\n0.3,0.4\n").unwrap();
    let o = run_mean(&["--data", &csv.display().to_string()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("r.csv"));
    fs::write(&csv, "0.1\nabc\n").unwrap();
    assert_eq!(run_mean(&["--data", &csv.display().to_string()]).status.code(), Some(2));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.csv");
    let o = dpgraph(&["bench", "--widths", "16,64,256", "--reps", "5", "--out", &out.display().to_string()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 4);
}

#[test]
fn bench_single_rep_warns() {
    let o = dpgraph(&["bench", "--widths", "4", "--reps", "1"]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("warning"));
    assert!(String::from_utf8(o.stdout).unwrap().starts_with(CSV_HEADER));
}

#[test]
fn bench_rejects_bad_widths() {
    for w in ["0", "16,x", "-4"] {
        assert_eq!(dpgraph(&["bench", "--widths", w]).status.code(), Some(2), "{w}");
    }
}
