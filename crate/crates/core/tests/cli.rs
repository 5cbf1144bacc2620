use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_balancing"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

const DATASET: &str = r#"{
  "schema": {"treatment": "w", "outcome": "y", "exclude": ["e", "m1", "m0"]},
  "weighting": {"dispersion": "entropy"},
  "simulation": {"kind": "dataset", "dgp": {
    "n": 300, "d": 2, "covariates": {"kind": "normal"},
    "propensity": {"basis": {"kind": "linear"}, "coefficients": {"x1": 0.8}},
    "outcome_treated": {"basis": {"kind": "linear"}, "coefficients": {"(intercept)": 2.0, "x2": 1.0}},
    "outcome_control": {"basis": {"kind": "linear"}, "coefficients": {}},
    "sigma_y": 0.5}}
}"#;

fn with_data(dir: &Path) {
    std::fs::write(dir.join("cfg.json"), DATASET).unwrap();
    let out = run(dir, &["simulate", "--config", "cfg.json", "--out", "sim"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn weights_writes_three_artifacts_with_config_and_version() {
    let dir = tempfile::tempdir().unwrap();
    with_data(dir.path());
    let out = run(dir.path(), &["weights", "--config", "cfg.json", "--data", "sim/data.csv", "--out", "w"]);
    assert_eq!(out.status.code(), Some(0));
    let w = dir.path().join("w");
    let csv = std::fs::read_to_string(w.join("weights.csv")).unwrap();
    assert!(csv.starts_with("id,weight\n"));
    assert_eq!(csv.lines().count(), 301);
    for name in ["solution.json", "balance.json"] {
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(w.join(name)).unwrap()).unwrap();
        assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
        assert_eq!(v["config"]["weighting"]["dispersion"], "entropy");
        assert_eq!(v["config"]["data"], "sim/data.csv");
    }
}

#[test]
fn input_errors_exit_one_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["weights", "--data", "missing.csv", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("o").exists());

    std::fs::write(dir.path().join("bad.json"), r#"{"wieghting": {}}"#).unwrap();
    assert_eq!(run(dir.path(), &["check-duality", "--config", "bad.json"]).status.code(), Some(1));

    std::fs::write(dir.path().join("data.csv"), "w,y,x1\n1,1.0,0.5\n0,2.0,abc\n1,0.0,1.0\n").unwrap();
    let out = run(dir.path(), &["estimate", "--data", "data.csv", "--out", "e"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("x1"));
    assert!(!dir.path().join("e").exists());
}

#[test]
fn zero_replications_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"simulation": {"kind": "coverage", "replications": 0, "basis": {"kind": "linear"},
      "estimation": {"estimand": {"kind": "treated-mean"}},
      "dgp": {"n": 100, "d": 1, "covariates": {"kind": "uniform"},
        "propensity": {"basis": {"kind": "linear"}, "coefficients": {}},
        "outcome_treated": {"basis": {"kind": "linear"}, "coefficients": {}},
        "outcome_control": {"basis": {"kind": "linear"}, "coefficients": {}}, "sigma_y": 1.0}}}"#;
    std::fs::write(dir.path().join("c.json"), cfg).unwrap();
    assert_eq!(run(dir.path(), &["simulate", "--config", "c.json"]).status.code(), Some(1));
}

#[test]
fn failed_verification_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"duality": {"instances": 2, "tolerance": 0.0}}"#).unwrap();
    let out = run(dir.path(), &["check-duality", "--config", "c.json", "--out", "d"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(dir.path().join("d/duality.json").exists());
}

#[test]
fn non_convergence_exits_two_and_still_writes() {
    let dir = tempfile::tempdir().unwrap();
    with_data(dir.path());
    let cfg = DATASET.replace(r#""dispersion": "entropy""#, r#""dispersion": "entropy", "max_iter": 1"#);
    std::fs::write(dir.path().join("slow.json"), cfg).unwrap();
    let out = run(dir.path(), &["weights", "--config", "slow.json", "--data", "sim/data.csv", "--out", "w"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(dir.path().join("w/weights.csv").exists());
}

#[test]
fn estimate_reports_interval_and_decomposition() {
    let dir = tempfile::tempdir().unwrap();
    with_data(dir.path());
    let cfg = DATASET.replace(r#""weighting""#, r#""oracle": {}, "weighting""#);
    std::fs::write(dir.path().join("est.json"), cfg).unwrap();
    let out = run(dir.path(), &["estimate", "--config", "est.json", "--data", "sim/data.csv", "--format", "json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let ci = v["ci"].as_array().unwrap();
    let point = v["point"].as_f64().unwrap();
    assert!(ci[0].as_f64().unwrap() < point && point < ci[1].as_f64().unwrap());
    assert!((point - 2.0).abs() < 0.5);
    let d = &v["error_decomposition"];
    let sum = d["imbalance"].as_f64().unwrap() + d["noise"].as_f64().unwrap() + d["sampling"].as_f64().unwrap();
    assert!((sum - d["total"].as_f64().unwrap()).abs() < 1e-12);
}

#[test]
fn balance_accepts_weight_files_and_kernel_weights_run() {
    let dir = tempfile::tempdir().unwrap();
    with_data(dir.path());
    let cfg = DATASET.replace(
        r#""weighting""#,
        r#""kernel": {"spec": {"kind": "gaussian"}, "constraints": "simplex"}, "weighting""#,
    );
    std::fs::write(dir.path().join("k.json"), cfg).unwrap();
    let out = run(dir.path(), &["weights", "--config", "k.json", "--data", "sim/data.csv", "--out", "k"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let sol: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("k/solution.json")).unwrap()).unwrap();
    assert!(sol["result"]["kernel"]["bandwidth"].as_f64().unwrap() > 0.0);
    assert!(sol["result"]["sigma2"].as_f64().unwrap() > 0.0);
    let out = run(
        dir.path(),
        &["balance", "--config", "k.json", "--data", "sim/data.csv", "--weights", "k/weights.csv", "--format", "json"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["kernel"].as_f64().unwrap() >= 0.0);
    assert!(v["effective_sample_size"].as_f64().unwrap() > 1.0);
}
