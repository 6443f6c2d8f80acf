mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sonoseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sonoseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = sonoseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synthgen_evaluate_and_track_with_reference_adapters() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["synthgen", "--count", "4", "--out", p(&data), "--seed", "5", "--cine-loops", "2", "--frames", "4"]);
    let manifest = data.join("manifest.json");
    assert_eq!(json(&manifest)["records"].as_array().unwrap().len(), 4);
    assert_eq!(json(&data.join("run_config.json"))["command"], "synthgen");

    let run = |name: &str, model: &str| {
        let out = tmp.path().join(name);
        ok(&["evaluate", "--model", model, "--data", p(&manifest), "--out", p(&out), "--workers", "2"]);
        out
    };
    let a = run("eval-a", "oracle");
    let b = run("eval-b", "oracle");
    let report = json(&a.join("report.json"));
    assert_eq!(report["fr90"], 0.0);
    assert_eq!(report["noc80"], 1.0);
    for f in ["report.json", "traces.jsonl", "curves.tsv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let empty = run("eval-empty", "empty");
    assert_eq!(json(&empty.join("report.json"))["fr80"], 1.0);

    let track = tmp.path().join("track");
    ok(&["track-eval", "--model", "oracle", "--loops", p(&data.join("loops")), "--out", p(&track)]);
    let summary = json(&track.join("tracking_summary.json"));
    let rows = summary.as_array().unwrap();
    assert!(!rows.is_empty());
    assert!(rows[0].get("Avg. num of interventions").is_some());
    assert_eq!(json(&track.join("tracking_reports.json")).as_array().unwrap().len(), 2);
}

#[test]
fn train_then_evaluate_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let train = tmp.path().join("train");
    let val = tmp.path().join("val");
    ok(&["synthgen", "--count", "3", "--out", p(&train), "--seed", "1"]);
    ok(&["synthgen", "--count", "1", "--out", p(&val), "--seed", "2", "--split", "val"]);
    let config = tmp.path().join("train.json");
    let tiny = serde_json::to_value(common::tiny_config()).unwrap();
    std::fs::write(
        &config,
        serde_json::json!({"model": tiny, "train": {"epochs": 5, "batch_size": 2}}).to_string(),
    )
    .unwrap();
    let run = tmp.path().join("run");
    ok(&[
        "train", "--data", p(&train.join("manifest.json")), "--val", p(&val.join("manifest.json")),
        "--config", p(&config), "--epochs", "1", "--out", p(&run),
    ]);
    let rc = json(&run.join("run_config.json"));
    assert_eq!(rc["resolved"]["train"]["epochs"], 1, "flag overrides the file");
    assert_eq!(rc["resolved"]["train"]["batch_size"], 2, "file overrides defaults");
    assert_eq!(json(&run.join("train_report.json"))["epoch_losses"].as_array().unwrap().len(), 1);

    let ckpt = run.join("last.safetensors");
    assert!(ckpt.exists());
    let eval = tmp.path().join("eval");
    ok(&[
        "evaluate", "--model", p(&ckpt), "--data", p(&val.join("manifest.json")),
        "--budget", "3", "--start-mode", "box", "--out", p(&eval),
    ]);
    let report = json(&eval.join("report.json"));
    assert_eq!(report["budget"], 3);
    assert_eq!(report["start_mode"], "box");
}

#[test]
fn exit_codes_separate_usage_data_and_success() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(sonoseg(&["--help"]).status.code(), Some(0));
    assert_eq!(sonoseg(&["evaluate", "--bogus"]).status.code(), Some(1));
    assert_eq!(sonoseg(&["frobnicate"]).status.code(), Some(1));

    let missing = tmp.path().join("nope.json");
    let out = sonoseg(&["evaluate", "--model", "oracle", "--data", p(&missing), "--out", p(&tmp.path().join("e"))]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nope.json"), "{stderr}");

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"width": "wide"}"#).unwrap();
    let out = sonoseg(&["synthgen", "--config", p(&bad), "--count", "1", "--out", p(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));

    let out = sonoseg(&["evaluate", "--model", "oracle", "--data", p(&missing), "--budget", "30", "--cap", "20"]);
    assert_eq!(out.status.code(), Some(1));
}
