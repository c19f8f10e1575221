use std::path::Path;
use std::process::{Command, Output};

use sparsenet::harness::config::{Arch, DataConfig, ModelConfig, PruneSection, TrainSection};
use sparsenet::harness::ExperimentConfig;
use sparsenet::pruning::{Criterion, Schedule};
use sparsenet::harness::Method;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparsenet")).args(args).output().unwrap()
}

fn error_category(out: &Output) -> String {
    let err: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    err["error"]["category"].as_str().unwrap().to_string()
}

fn tiny_config(dir: &Path) -> String {
    let cfg = ExperimentConfig {
        model: ModelConfig { arch: Arch::Mlp { hidden: vec![8] }, bayesian: false },
        data: DataConfig { train_samples: 120, test_samples: 40, ..Default::default() },
        train: TrainSection { epochs: 1, batch_size: 40, seeds: vec![3], ..Default::default() },
        prune: PruneSection { methods: vec![Method::criterion(Criterion::Snip, Schedule::Before)], sparsities: vec![0.5] },
        ..Default::default()
    };
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn train_writes_a_checkpoint_and_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    let o = run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("dense_seed3.spnn").is_file());
    assert!(out.join("train_seed3.csv").is_file());

    let ckpt = out.join("dense_seed3.spnn");
    let o = run(&["eval", "--config", &cfg, "--out", out.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("eval_seed3.csv").is_file());

    let o = run(&["report", "--out", out.to_str().unwrap(), "--records", out.join("eval_seed3.csv").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("summary_accuracy.csv").is_file());
}

#[test]
fn missing_or_invalid_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--config", dir.path().join("absent.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_category(&o), "config");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"epochs": "many"}}"#).unwrap();
    let o = run(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn missing_records_exit_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_category(&o), "data");
}

#[test]
fn corrupt_checkpoint_exits_with_checkpoint_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ckpt = dir.path().join("junk.spnn");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    let o = run(&["eval", "--config", &cfg, "--out", dir.path().to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5));
    assert_eq!(error_category(&o), "checkpoint");
}

#[test]
fn unknown_flags_are_argument_errors() {
    let o = run(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
}
