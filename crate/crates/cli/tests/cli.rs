use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jsonschema::JSONSchema;
use serde_json::Value;
use sha2::{Digest, Sha256};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn schema(name: &str) -> JSONSchema {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(format!("{name}.schema.json"));
    let value: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    JSONSchema::compile(&value).unwrap()
}

fn assert_valid(name: &str, value: &Value) {
    let s = schema(name);
    if let Err(errors) = s.validate(value) {
        let msgs: Vec<String> = errors.map(|e| format!("{} at {}", e, e.instance_path)).collect();
        panic!("{name} output fails its schema: {msgs:?}\n{value:#}");
    };
}

fn mechtest(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mechtest")).current_dir(dir).args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("error report on stderr");
    let v: Value = serde_json::from_str(line).unwrap();
    assert_valid("error", &v);
    v
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bounds_on_binary_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("binary_violation.csv");
    let out_path = dir.path().join("bounds.json");
    let out = mechtest(dir.path(), &["bounds", "--input", s(&input), "--out", s(&out_path), "--breakdown"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = read_json(&out_path);
    assert_valid("bounds", &v);
    assert!((v["nu_lb"][0].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-9);
    assert!((v["slack"].as_f64().unwrap() - 0.2).abs() < 1e-9);
    assert!((v["nu_pooled_lb"].as_f64().unwrap() - 0.3).abs() < 1e-9);

    let plot = fs::read_to_string(dir.path().join("bounds.json.plot.csv")).unwrap();
    let lines: Vec<&str> = plot.lines().collect();
    assert_eq!(lines[0], "k,m,y,p_control,p_treated,delta");
    assert_eq!(lines.len(), 5);
    let delta: f64 = lines[2].rsplit(',').next().unwrap().parse().unwrap();
    assert!((delta - 0.2).abs() < 1e-12);

    let manifest = read_json(&dir.path().join("bounds.json.manifest.json"));
    assert_valid("manifest", &manifest);
    let hash = format!("{:x}", Sha256::digest(fs::read(&input).unwrap()));
    assert_eq!(manifest["input"]["sha256"], hash.as_str());
    assert_eq!(manifest["command"], "bounds");
}

#[test]
fn bounds_on_null_consistent_data() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&mechtest(dir.path(), &["bounds", "--input", s(&fixture("binary_null.csv"))]));
    assert_valid("bounds", &v);
    assert!(v["slack"].as_f64().unwrap() <= 1e-12);
    assert!(v["nu_lb"].as_array().unwrap().iter().all(|x| x.as_f64().unwrap() == 0.0));
    assert!(dir.path().join("mechtest-manifest.json").exists());
    assert!(dir.path().join("mechtest-plot.csv").exists());
}

#[test]
fn unknown_column_exits_two_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("binary_violation.csv");
    let out = mechtest(dir.path(), &["test", "--input", s(&input), "--y-col", "earnings"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "structural");
    assert!(err["error"]["message"].as_str().unwrap().contains("earnings"));

    // Without a mapping the parser reports the canonical name it looked for.
    let out = mechtest(dir.path(), &["test", "--input", s(&fixture("monotone_infeasible.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_json(&out)["error"]["message"].as_str().unwrap().contains("`y`"));
}

#[test]
fn renamed_columns_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("monotone_infeasible.csv");
    let args = ["diagnose", "--input", s(&input), "--y-col", "outcome", "--d-col", "treat", "--m-cols", "med"];
    let v = stdout_json(&mechtest(dir.path(), &args));
    assert_valid("diagnose", &v);
    assert_eq!(v["n_rows"], serde_json::json!([1000, 1000]));
    assert_eq!(v["identification"]["feasible"], false);
    assert!((v["identification"]["min_defier_budget"].as_f64().unwrap() - 0.3).abs() < 1e-9);
}

#[test]
fn empty_identified_set_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("monotone_infeasible.csv");
    let base = ["bounds", "--input", s(&input), "--y-col", "outcome", "--d-col", "treat", "--m-cols", "med"];
    let out = mechtest(dir.path(), &base);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "identification");
    assert!((err["error"]["suggested_dbar"].as_f64().unwrap() - 0.3).abs() < 1e-9);

    let mut relaxed = base.to_vec();
    relaxed.push("--auto-relax");
    let v = stdout_json(&mechtest(dir.path(), &relaxed));
    assert_valid("bounds", &v);
    assert!((v["auto_relaxed_dbar"].as_f64().unwrap() - 0.3).abs() < 1e-9);
}

#[test]
fn test_rejects_on_violation_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("binary_violation.csv");
    let args = ["test", "--input", s(&input), "--bins", "raw", "--seed", "3", "--draws", "499", "--p-curve"];
    let first = stdout_json(&mechtest(dir.path(), &args));
    assert_valid("test", &first);
    assert_eq!(first["reject"], true);
    assert!(first["p_value"].as_f64().unwrap() < 0.01);
    let again = stdout_json(&mechtest(dir.path(), &args));
    assert_eq!(first, again);

    let manifest = read_json(&dir.path().join("mechtest-manifest.json"));
    assert_valid("manifest", &manifest);
    assert_eq!(manifest["seed"], 3);

    let chisq =
        stdout_json(&mechtest(dir.path(), &["test", "--input", s(&input), "--bins", "raw", "--method", "cond-chisq"]));
    assert_valid("test", &chisq);
    assert_eq!(chisq["reject"], true);
    assert!(chisq["df"].as_u64().unwrap() >= 1);
}

#[test]
fn test_does_not_reject_null_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("binary_null.csv");
    let v = stdout_json(&mechtest(dir.path(), &["test", "--input", s(&input), "--bins", "raw", "--draws", "299"]));
    assert_valid("test", &v);
    assert_eq!(v["reject"], false);
    assert_eq!(v["statistic"].as_f64().unwrap(), 0.0);
}

#[test]
fn bad_alpha_and_few_draws_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("binary_violation.csv");
    let out = mechtest(dir.path(), &["test", "--input", s(&input), "--alpha", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "domain");
    let out = mechtest(dir.path(), &["test", "--input", s(&input), "--draws", "50"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "precondition");
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# settings\nbins = raw\nmethod = cond-chisq\nalpha = 0.1\n").unwrap();
    let input = fixture("binary_violation.csv");
    let v = stdout_json(&mechtest(dir.path(), &["test", "--input", s(&input), "--config", s(&cfg)]));
    assert_eq!(v["method"], "cond-chisq");
    assert_eq!(v["alpha"], 0.1);
    let v = stdout_json(&mechtest(dir.path(), &["test", "--input", s(&input), "--config", s(&cfg), "--alpha", "0.01"]));
    assert_eq!(v["alpha"], 0.01);

    fs::write(&cfg, "alpha 0.1\n").unwrap();
    let out = mechtest(dir.path(), &["test", "--input", s(&input), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn robustness_writes_grid_and_breakdown() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("binary_violation.csv");
    let csv = dir.path().join("grid.csv");
    let v = stdout_json(&mechtest(
        dir.path(),
        &["robustness", "--input", s(&input), "--out", s(&csv), "--grid-step", "0.1"],
    ));
    assert_valid("robustness", &v);
    assert_eq!(v["points"].as_array().unwrap().len(), 11);
    let b = &v["breakdown"];
    assert!(b["dbar_star"].as_f64().unwrap() > 0.0);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "dbar,feasible,nu_pooled_lb,degenerate");
    assert_eq!(text.lines().count(), 12);
    // The pooled bound can only fall as the defier budget grows.
    let lbs: Vec<f64> = v["points"].as_array().unwrap().iter().map(|p| p["nu_pooled_lb"].as_f64().unwrap()).collect();
    assert!(lbs.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    assert_valid("manifest", &read_json(&dir.path().join("grid.csv.manifest.json")));
}

#[test]
fn ade_reports_intervals() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("binary_violation.csv");
    let v = stdout_json(&mechtest(dir.path(), &["ade", "--input", s(&input)]));
    assert_valid("ade", &v);
    let iv = v["intervals"].as_array().unwrap();
    assert_eq!(iv.len(), 2);
    // With a binary outcome the direct-effect bound on k = 0 matches the share bound.
    assert!((iv[0]["lb"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-9);

    let out = mechtest(dir.path(), &["ade", "--input", s(&input), "--bins", "cut:0.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "unsupported");
}

#[test]
fn diagnose_counts_cells() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&mechtest(dir.path(), &["diagnose", "--input", s(&fixture("binary_violation.csv"))]));
    assert_valid("diagnose", &v);
    let cells = v["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 8);
    assert_eq!(cells.iter().map(|c| c["rows"].as_u64().unwrap()).sum::<u64>(), 2000);
    assert_eq!(v["median_cell_count"].as_f64().unwrap(), 250.0);
    assert_eq!(v["identification"]["feasible"], true);
}

#[test]
fn simulate_writes_per_draw_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("results.csv");
    let args = [
        "simulate",
        "--t",
        "0.5",
        "--nsims",
        "6",
        "--clusters",
        "20",
        "--method",
        "lf-boot",
        "--draws",
        "200",
        "--seed",
        "7",
        "--out",
        s(&csv),
    ];
    let v = stdout_json(&mechtest(dir.path(), &args));
    assert_valid("simulate", &v);
    assert_eq!(v["design"], "clustered");
    assert_eq!(v["successes"].as_u64().unwrap() + v["errors"].as_u64().unwrap(), 6);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "sim_id,statistic,p_value,reject,nu_pooled_lb,median_cell_count");
    assert_eq!(lines.count(), 6);
    let manifest = read_json(&dir.path().join("results.csv.manifest.json"));
    assert_valid("manifest", &manifest);
    assert_eq!(manifest["seed"], 7);

    let again = dir.path().join("again.csv");
    let mut args2 = args.to_vec();
    let last = args2.len() - 1;
    args2[last] = s(&again);
    stdout_json(&mechtest(dir.path(), &args2));
    assert_eq!(text, fs::read_to_string(&again).unwrap());
}

#[test]
fn simulate_from_input_pools() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sims.csv");
    let input = fixture("binary_violation.csv");
    let args = [
        "simulate",
        "--input",
        s(&input),
        "--t",
        "1",
        "--nsims",
        "3",
        "--n",
        "500",
        "--bins",
        "raw",
        "--method",
        "cond-chisq",
        "--out",
        s(&csv),
    ];
    let v = stdout_json(&mechtest(dir.path(), &args));
    assert_valid("simulate", &v);
    assert_eq!(v["design"], "input");
    let manifest = read_json(&dir.path().join("sims.csv.manifest.json"));
    assert_valid("manifest", &manifest);
    assert!(manifest["input"]["sha256"].is_string());
}
