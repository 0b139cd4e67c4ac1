//! The `depnet` binary end to end: exit codes, config validation and the
//! layout of run directories.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn depnet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depnet")).current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A 10-subject synthetic set (V = 4, 6 s) plus a mini run config.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = depnet(
        &["synth", "--out", ".", "--subjects", "10", "--channels", "4", "--duration", "6", "--seed", "1"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let mut cfg = serde_json::to_value(common::mini_hyper(r#""epochs":1"#)).unwrap();
    cfg["dataset"] = "manifest.json".into();
    cfg["adjacency"] = "adjacency.csv".into();
    write_config(dir.path(), "run.json", &cfg);
    dir
}

fn write_config(dir: &Path, name: &str, v: &Value) {
    std::fs::write(dir.join(name), serde_json::to_vec_pretty(v).unwrap()).unwrap();
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn synth_writes_a_loadable_dataset() {
    let dir = workspace();
    for f in ["manifest.json", "adjacency.csv", "layout.csv", "synth.json", "config.json"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let manifest = read_json(&dir.path().join("manifest.json"));
    assert_eq!(manifest.as_array().map(Vec::len).or_else(|| manifest["subjects"].as_array().map(Vec::len)), Some(10));
}

#[test]
fn bad_configs_exit_with_code_two() {
    let dir = workspace();
    let base = read_json(&dir.path().join("run.json"));
    let cases: [(&str, Value, &str); 4] = [
        ("lambda", serde_json::json!(-0.1), "lambda"),
        ("momentum", serde_json::json!(0.9), "momentum"),
        ("windows", serde_json::json!(0), "windows"),
        ("learning_rate", serde_json::json!("fast"), "learning_rate"),
    ];
    for (key, value, needle) in cases {
        let mut cfg = base.clone();
        cfg[key] = value;
        write_config(dir.path(), "bad.json", &cfg);
        let o = depnet(&["train", "--config", "bad.json", "--out", "r"], dir.path());
        assert_eq!(code(&o), 2, "{key}: {}", stderr(&o));
        assert!(stderr(&o).contains(needle), "{key}: {}", stderr(&o));
    }
    std::fs::write(dir.path().join("broken.json"), "{not json").unwrap();
    assert_eq!(code(&depnet(&["dims", "--config", "broken.json", "--len", "256"], dir.path())), 2);
    let o = depnet(&["cv", "--config", "run.json", "--out", "r", "--ablate", "tes,lstm"], dir.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = depnet(&["cv", "--config", "run.json", "--out", "r", "--ablate", "everything"], dir.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn missing_data_exits_with_code_three() {
    let dir = workspace();
    let mut cfg = read_json(&dir.path().join("run.json"));
    cfg["dataset"] = "nowhere.json".into();
    write_config(dir.path(), "missing.json", &cfg);
    let o = depnet(&["train", "--config", "missing.json", "--out", "r"], dir.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn dims_reports_feature_width() {
    let dir = workspace();
    let o = depnet(&["dims", "--config", "run.json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["fe"], 28);
    assert_eq!(v["window_len"], 256);
}

#[test]
fn train_eval_export_round_trip() {
    let dir = workspace();
    let d = dir.path();
    let o = depnet(&["train", "--config", "run.json", "--out", "t", "--fold", "2", "--seed", "4"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint.bin", "history.csv", "predictions.csv", "metrics.json", "config.json", "run.json"] {
        assert!(d.join("t").join(f).exists(), "missing {f}");
    }
    let run = read_json(&d.join("t/run.json"));
    assert_eq!(run["command"], "train");
    assert_eq!(run["seed"], 4);
    let history = std::fs::read_to_string(d.join("t/history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,loss_c,loss_d,train_acc"));
    assert_eq!(history.lines().count(), 2);

    let o = depnet(&["eval", "--config", "run.json", "--out", "e", "--checkpoint", "t/checkpoint.bin", "--fold", "2"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    // The fold's test predictions are reproduced from the checkpoint.
    assert_eq!(
        std::fs::read_to_string(d.join("e/predictions.csv")).unwrap(),
        std::fs::read_to_string(d.join("t/predictions.csv")).unwrap()
    );

    let o = depnet(&["export-features", "--config", "run.json", "--out", "x", "--checkpoint", "t/checkpoint.bin"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let shapes = read_json(&d.join("x/shapes.json"));
    let shapes = shapes.as_object().unwrap();
    assert_eq!(shapes.len(), 10);
    let (id, entry) = shapes.iter().next().unwrap();
    // T = 3 windows, V = 4 nodes, fs = 4, LSTM width fl = 4.
    assert_eq!(entry["f_sps"], serde_json::json!([3, 4, 4]));
    assert_eq!(entry["a_fc"], serde_json::json!([3, 4, 4]));
    assert_eq!(entry["a"], serde_json::json!([3, 4, 4]));
    for f in ["f_sps", "f_tes", "a_fc", "a"] {
        let text = std::fs::read_to_string(d.join("x").join(id).join(format!("{f}.csv"))).unwrap();
        assert!(text.lines().count() > 1, "{f} is empty");
    }

    std::fs::write(d.join("junk.bin"), b"DEPNETCK garbage").unwrap();
    let o = depnet(&["eval", "--config", "run.json", "--out", "e2", "--checkpoint", "junk.bin"], d);
    assert_ne!(code(&o), 0);
}

#[test]
fn cv_and_ablate_layouts() {
    let dir = workspace();
    let d = dir.path();
    let o = depnet(&["cv", "--config", "run.json", "--out", "cv", "--parallel", "2"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    for k in 0..10 {
        assert!(d.join(format!("cv/fold_{k}/predictions.csv")).exists());
    }
    let pooled = std::fs::read_to_string(d.join("cv/predictions.csv")).unwrap();
    assert_eq!(pooled.lines().count(), 11);
    let metrics = read_json(&d.join("cv/metrics.json"));
    for key in ["acc", "pam"] {
        assert!(metrics.to_string().contains(key), "metrics lack {key}: {metrics}");
    }

    let o = depnet(&["ablate", "--config", "run.json", "--out", "ab", "--ablate", "tis,gtn"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let sub = d.join("ab/ablate-tis+gtn");
    assert!(sub.join("metrics.json").exists());
    let cfg = read_json(&sub.join("config.json"));
    assert!(cfg["ablations"].to_string().contains("tis"), "{cfg}");
}
