use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn lmmsel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmmsel")).args(args).output().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn error_kind(out: &Output) -> String {
    let err: Value = serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("stderr: {}", String::from_utf8_lossy(&out.stderr)));
    err["error"]["kind"].as_str().unwrap().to_string()
}

/// Writes one M1 replicate into `dir` and returns the covariate spec.
fn generate(dir: &Path) -> String {
    let out = lmmsel(&["generate", "--model", "M1", "--seed", "5", "--out-dir", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    json(&dir.join("truth.json"))["covariate_cols"].as_str().unwrap().to_string()
}

fn data_args(dir: &Path, cov: &str) -> Vec<String> {
    let p = |f: &str| dir.join(f).to_str().unwrap().to_string();
    vec![
        "--y".into(),
        p("y.csv"),
        "--x".into(),
        p("x.csv"),
        "--groups".into(),
        p("groups.csv"),
        "--covariate-cols".into(),
        cov.into(),
    ]
}

#[test]
fn tune_then_verify() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cov = generate(&data);
    let out_dir = tmp.path().join("tune");
    let mut args = vec!["tune".to_string()];
    args.extend(data_args(&data, &cov));
    args.extend(["--grid-size", "12", "--refit", "--out-dir"].map(String::from));
    args.push(out_dir.to_str().unwrap().into());
    let out = lmmsel(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let path = std::fs::read_to_string(out_dir.join("path.csv")).unwrap();
    let lines: Vec<&str> = path.lines().collect();
    assert_eq!(lines[0], "lambda,bic,ebic,support_size,sigma2_e,degenerate");
    assert_eq!(lines.len(), 13);

    let fit = json(&out_dir.join("fit.json"));
    assert_eq!(fit["schema_version"], 1);
    assert_eq!(fit["column_names"].as_array().unwrap().len(), 80);
    assert!(fit["refit"].is_object());
    let manifest = json(&out_dir.join("manifest.json"));
    assert_eq!(manifest["command"], "tune");
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 3);
    assert!(manifest["inputs"].as_object().unwrap().values().all(|v| v.as_str().unwrap().len() == 64));

    let mut args = vec!["verify".to_string()];
    args.extend(data_args(&data, &cov));
    args.extend(["--fit".to_string(), out_dir.join("fit.json").to_str().unwrap().into()]);
    let out = lmmsel(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["ok"], true);
}

#[test]
fn verify_detects_tampering() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cov = generate(&data);
    let out_dir = tmp.path().join("fit");
    let mut args = vec!["fit".to_string()];
    args.extend(data_args(&data, &cov));
    args.extend(["--lambda", "60", "--out-dir"].map(String::from));
    args.push(out_dir.to_str().unwrap().into());
    let out = lmmsel(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let fit_path = out_dir.join("fit.json");
    let mut fit = json(&fit_path);
    let obj = fit["fit"]["objective"].as_f64().unwrap();
    fit["fit"]["objective"] = Value::from(obj + 1e-3);
    std::fs::write(&fit_path, serde_json::to_string(&fit).unwrap()).unwrap();

    let mut args = vec!["verify".to_string()];
    args.extend(data_args(&data, &cov));
    args.extend(["--fit".to_string(), fit_path.to_str().unwrap().into()]);
    let out = lmmsel(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn simulate_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let out = lmmsel(&["simulate", "--model", "M1", "--reps", "2", "--seed", "3", "--grid-size", "10", "--refit", "--out-dir", dir]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let agg = std::fs::read_to_string(tmp.path().join("aggregate.csv")).unwrap();
    let header = agg.lines().next().unwrap();
    assert!(header.starts_with("method,statistic,truth,support_exact,support_size,tp,sigma2_e,"));
    // penalized and refit passes, mean and sd rows each
    assert_eq!(agg.lines().count(), 5);
    let reps = std::fs::read_to_string(tmp.path().join("replicates.csv")).unwrap();
    assert_eq!(reps.lines().count(), 5);
    let manifest = json(&tmp.path().join("manifest.json"));
    assert_eq!(manifest["seed"], 3);
}

#[test]
fn usage_errors_exit_2() {
    let out = lmmsel(&["simulate", "--model", "M1", "--reps", "1", "--alpha", "0.05"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "config");

    let out = lmmsel(&["simulate", "--model", "M7", "--reps", "1"]);
    assert_eq!(out.status.code(), Some(2));

    let out = lmmsel(&["simulate", "--model", "M1", "--reps", "0"]);
    assert_eq!(out.status.code(), Some(2));

    let out = lmmsel(&["simulate", "--model", "M1", "--reps", "1", "--method", "pbol+"]);
    assert_eq!(out.status.code(), Some(2));

    let out = lmmsel(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn penalty_required_in_high_dimension() {
    let tmp = tempfile::tempdir().unwrap();
    let y = tmp.path().join("y.csv");
    let x = tmp.path().join("x.csv");
    std::fs::write(&y, "y\n1\n2\n3\n").unwrap();
    std::fs::write(&x, "a,b,c,d\n1,0,1,2\n1,1,0,3\n1,2,2,1\n").unwrap();
    let out = lmmsel(&["fit", "--y", y.to_str().unwrap(), "--x", x.to_str().unwrap(), "--lambda", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("penalty required"));
}

#[test]
fn bad_data_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let y = tmp.path().join("y.csv");
    let x = tmp.path().join("x.csv");
    let g = tmp.path().join("g.csv");
    std::fs::write(&y, "y\n1\n2\nnot-a-number\n").unwrap();
    std::fs::write(&x, "a,b\n1,0\n1,1\n1,2\n").unwrap();
    std::fs::write(&g, "g\n1\n1\n2\n").unwrap();
    let args = |y: &Path| {
        vec![
            "fit".to_string(),
            "--y".into(),
            y.to_str().unwrap().into(),
            "--x".into(),
            x.to_str().unwrap().into(),
            "--groups".into(),
            g.to_str().unwrap().into(),
            "--lambda".into(),
            "1".into(),
            "--out-dir".into(),
            tmp.path().to_str().unwrap().into(),
        ]
    };
    let out = lmmsel(&args(&y).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_kind(&out), "data");

    let missing = tmp.path().join("missing.csv");
    let out = lmmsel(&args(&missing).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(3));

    std::fs::write(&y, "y\n1\n2\n3\n4\n").unwrap();
    let out = lmmsel(&args(&y).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(3));
}
