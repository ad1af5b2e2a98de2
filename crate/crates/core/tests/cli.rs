use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_omoe-lab"))
        .args(args)
        .env("OMOE_LAB_THREADS", "2")
        .output()
        .unwrap()
}

fn error_object(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|_| panic!("stderr is not a JSON object: {text}"))
}

const SMALL: &[&str] = &[
    "--override",
    "task.n_per_cluster=40",
    "--override",
    "epochs=2",
    "--seeds",
    "3,4",
];

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL.iter().copied()).collect()
}

#[test]
fn train_writes_report_timing_and_models() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let out = lab(&with_small(&["train", "--out", out_dir, "--save-models"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 2);
    assert_eq!(report["config"]["seeds"], serde_json::json!([3, 4]));
    assert!(report["artifact"].as_str().unwrap().starts_with("omoe-lab"));
    let timing: Value = serde_json::from_slice(&std::fs::read(dir.path().join("timing.json")).unwrap()).unwrap();
    assert_eq!(timing.as_array().unwrap().len(), 2);

    let a = dir.path().join("model_seed3.json");
    let b = dir.path().join("model_seed4.json");
    let out = lab(&["metrics", "--omoe", a.to_str().unwrap(), "--base", b.to_str().unwrap()]);
    assert!(out.status.success());
    let m: Value = serde_json::from_slice(&out.stdout).unwrap();
    let dd = m["diverse_degree"]["larger"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&dd));
}

#[test]
fn config_errors_exit_2_with_field_path() {
    let out = lab(&["train", "--override", "omoe.s=1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_object(&out);
    assert_eq!(err["error"], "config");
    assert_eq!(err["path"], "omoe.s");

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"model": {"d": 8, "widht": 3}}"#).unwrap();
    let out = lab(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_object(&out)["path"].as_str().unwrap().starts_with("model"));

    let out = lab(&["train", "--override", "model.experts=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_object(&out)["message"].as_str().unwrap().contains("omoe.enabled=false"));

    let out = lab(&["compare-optimizers", "--kinds", "lamb"]);
    assert_eq!(out.status.code(), Some(2));
    let out = lab(&["ablate-skip", "--s-values", "5,5"]);
    assert_eq!(out.status.code(), Some(2));
    let out = lab(&["ablate-experts", "--m-values", "1,2"]);
    assert_eq!(out.status.code(), Some(2));
    let out = lab(&["train", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_3() {
    let out = lab(&["metrics", "--omoe", "/nonexistent/a.json", "--base", "/nonexistent/b.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_object(&out)["error"], "io");

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("gone.csv");
    let over = format!(
        r#"task={{"kind":"csv","path":"{}","schema":{{"features":["a"],"target":"y","classes":2}}}}"#,
        missing.display()
    );
    let out = lab(&["train", "--override", &over, "--override", "omoe.enabled=false"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn overhead_and_single_kind_comparison() {
    let out = lab(&["overhead", "--override", "model.d=8", "--override", "model.h=16"]);
    assert!(out.status.success());
    let est: Value = serde_json::from_slice(&out.stdout).unwrap();
    let layers = est["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 2);
    // four experts, each buffering s - 1 = 4 means of width 8 between O steps
    assert_eq!(layers[0]["rls_macs"], 4 * 4 * (3 * 64 + 2 * 8));
    assert_eq!(layers[0]["averaging_macs"], 4 * 3 * 64);
    assert_eq!(layers[0]["projection_macs"], 4 * 16 * 64);
    assert!(est["optimizer_memory_ratio"].as_f64().unwrap() > 1.0);

    let dir = tempfile::tempdir().unwrap();
    let out = lab(&with_small(&["compare-optimizers", "--kinds", "sgd", "--out", dir.path().to_str().unwrap()]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table: Value =
        serde_json::from_slice(&std::fs::read(Path::new(dir.path()).join("compare_optimizers.json")).unwrap()).unwrap();
    assert_eq!(table["reports"].as_array().unwrap().len(), 2);
}
