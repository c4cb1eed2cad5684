//! End-to-end runs of the `ntnnr` binary.

use std::path::Path;
use std::process::{Command, Output};

fn ntnnr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ntnnr")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A small predator-prey run config written into `dir`; `overrides` replace or
/// extend the base keys.
fn small_config(dir: &Path, overrides: &[(&str, &str)]) -> String {
    let mut keys = vec![
        ("preset", "\"desk_pp\""),
        ("epochs", "5"),
        ("batch_size", "40"),
        ("epoch_size", "1"),
        ("hidden", "8"),
        ("head_dim", "4"),
        ("head_hidden", "8"),
    ];
    for &(k, v) in overrides {
        match keys.iter_mut().find(|(key, _)| *key == k) {
            Some(slot) => slot.1 = v,
            None => keys.push((k, v)),
        }
    }
    let text: String = keys.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    let path = dir.join("small.toml");
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn train(config: &str, out: &Path, extra: &[&str]) -> Output {
    let out = out.display().to_string();
    let mut args = vec!["train", "--config", config, "--out", &out, "--deterministic"];
    args.extend_from_slice(extra);
    let o = ntnnr(&args);
    assert!(o.status.success(), "train failed: {}", stderr(&o));
    o
}

#[test]
fn train_writes_metrics_checkpoint_and_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), &[]);
    let out = tmp.path().join("run");
    train(&cfg, &out, &[]);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.starts_with("epoch,env_steps,mean_reward,success_rate,ntnn_layer1,ntnn_layer2,"));
    assert!(out.join("checkpoint.ckpt").exists());
    let snapshot = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(snapshot.contains("epochs = 5"));
    assert!(snapshot.contains("deterministic = true"));
}

#[test]
fn deterministic_runs_are_byte_identical_and_regularizer_matters() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), &[]);
    for name in ["a", "b"] {
        train(&cfg, &tmp.path().join(name), &["--seed", "3"]);
    }
    train(&cfg, &tmp.path().join("none"), &["--seed", "3", "--regularizer", "none"]);
    let read = |n: &str| std::fs::read_to_string(tmp.path().join(n).join("metrics.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    let col = |text: &str, name: &str| -> Vec<String> {
        let mut lines = text.lines();
        let idx = lines.next().unwrap().split(',').position(|c| c == name).unwrap();
        lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
    };
    assert_ne!(col(&read("a"), "ntnn_layer1"), col(&read("none"), "ntnn_layer1"));
}

#[test]
fn snapshot_config_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), &[("env", "\"tj\""), ("tj_n_max_cars", "4")]);
    train(&cfg, &tmp.path().join("a"), &[]);
    let snapshot = tmp.path().join("a").join("config.toml").display().to_string();
    train(&snapshot, &tmp.path().join("b"), &[]);
    let read = |n: &str| std::fs::read(tmp.path().join(n).join("metrics.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
}

#[test]
fn bad_config_exits_with_field_message() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), &[("learning_rate", "-0.5")]);
    let o = ntnnr(&["train", "--config", &cfg, "--out", &tmp.path().join("x").display().to_string()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let cfg = small_config(tmp.path(), &[("batchsize", "4")]);
    let o = ntnnr(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batchsize"), "{}", stderr(&o));
}

#[test]
fn eval_reports_and_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), &[("env", "\"tj\""), ("epochs", "1")]);
    let out = tmp.path().join("run");
    train(&cfg, &out, &[]);
    let ckpt = out.join("checkpoint.ckpt").display().to_string();

    let run = || ntnnr(&["eval", "--checkpoint", &ckpt, "--episodes", "3", "--seed", "5", "--json"]);
    let (a, b) = (run(), run());
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    let v: serde_json::Value = serde_json::from_str(stdout(&a).trim()).unwrap();
    let s = v["success_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&s));

    let o = ntnnr(&["eval", "--checkpoint", &ckpt, "--episodes", "0"]);
    assert_eq!(o.status.code(), Some(2));

    let replay = tmp.path().join("replay.jsonl");
    let o = ntnnr(&["eval", "--checkpoint", &ckpt, "--episodes", "1", "--replay", &replay.display().to_string()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(&replay).unwrap().lines().count() > 0);

    let other = tmp.path().join("other.toml");
    std::fs::write(&other, "preset = \"desk_tj\"\nhidden = 12\n").unwrap();
    let o = ntnnr(&["eval", "--checkpoint", &ckpt, "--config", &other.display().to_string()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does not match the network"), "{}", stderr(&o));
}

#[test]
fn export_attention_writes_one_record_per_head_and_step() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), &[("epochs", "1"), ("pp_max_steps", "7")]);
    let out = tmp.path().join("run");
    train(&cfg, &out, &[]);
    let ckpt = out.join("checkpoint.ckpt").display().to_string();
    let path = tmp.path().join("att.jsonl");
    let o = ntnnr(&["export-attention", "--checkpoint", &ckpt, "--episodes", "2", "--out", &path.display().to_string()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = std::fs::read_to_string(&path).unwrap().lines().count();
    // Untrained predators rarely finish early; every episode runs at most 7 steps
    // and each step has two layer-1 heads plus one layer-2 head.
    assert!(lines > 0 && lines <= 2 * 7 * 3 && lines.is_multiple_of(3), "{lines}");

    let o = ntnnr(&["export-attention", "--checkpoint", &ckpt, "--out", "/nonexistent/dir/att.jsonl"]);
    assert!(!o.status.success());
}

#[test]
fn sweep_emits_the_requested_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), &[("env", "\"tj\""), ("epochs", "1"), ("batch_size", "20")]);
    let out = tmp.path().join("sweep");
    let o = ntnnr(&[
        "sweep-beta",
        "--config",
        &cfg,
        "--out",
        &out.display().to_string(),
        "--beta1",
        "0,0.01",
        "--beta2",
        "0,0.005,0.02",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.split(',').count() == 4));
    assert_eq!(stdout(&o), csv);
}

#[test]
fn selftest_passes() {
    let o = ntnnr(&["selftest"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("[PASS]")).count(), 8);
}

#[test]
fn unknown_flag_values_are_usage_errors() {
    let o = ntnnr(&["train", "--regularizer", "huge"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ntnnr(&["train", "--preset", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}
