//! End-to-end CLI checks on a miniature configuration: train, eval, replay,
//! and the error paths behind the documented exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn apex() -> Command {
    Command::new(env!("CARGO_BIN_EXE_apex"))
}

fn write_tiny_config(dir: &Path) -> PathBuf {
    let text = r#"
        [model]
        context_dim = 6
        sit_layers = 1
        sit_heads = 2
        sit_width = 12
        sit_ffn = 16
        adm_hidden = 10
        adm_head_hidden = 10
        history_cap = 24

        [track]
        min_length = 6.0
        max_length = 9.0

        [controller]
        horizon = 8
        candidates = 8
        stochastic_evals = 2

        [run]
        step_budget = 60

        [training]
        cycles = 1
        systems_per_cycle = 1
        steps_per_system = 50
        updates_per_cycle = 15
        batch_size = 4
        window = 3
        train_history_cap = 16
    "#;
    let path = dir.join("tiny.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn temp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("apex_cli_{name}_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn train_eval_replay_roundtrip() {
    let dir = temp_dir("roundtrip");
    let config = write_tiny_config(&dir);
    let train_out = dir.join("train");

    let status = apex()
        .args(["train", "--config"])
        .arg(&config)
        .args(["--seed", "3", "--out-dir"])
        .arg(&train_out)
        .status()
        .unwrap();
    assert!(status.success(), "train failed");
    assert!(train_out.join("checkpoint.json").exists());
    assert!(train_out.join("train_log.csv").exists());
    assert!(train_out.join("dataset.jsonl").exists());
    assert!(train_out.join("provenance.json").exists());

    let eval_out = dir.join("eval");
    let status = apex()
        .args(["eval", "--config"])
        .arg(&config)
        .args(["--seed", "11", "--systems", "2", "--checkpoint"])
        .arg(train_out.join("checkpoint.json"))
        .arg("--out-dir")
        .arg(&eval_out)
        .status()
        .unwrap();
    assert!(status.success(), "eval failed");
    let metrics = std::fs::read_to_string(eval_out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("experiment,system_seed,track_seed,method,budget"));
    assert_eq!(metrics.lines().count(), 3, "header + 2 systems");

    // Replay must reproduce the metrics byte for byte and exit 0.
    let replay_out = dir.join("replay");
    let output = apex()
        .args(["replay", "--provenance"])
        .arg(eval_out.join("provenance.json"))
        .arg("--out-dir")
        .arg(&replay_out)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "replay failed: {}",
        String::from_utf8_lossy(&output.stdout)
    );
    let replayed = std::fs::read(replay_out.join("metrics.csv")).unwrap();
    let original = std::fs::read(eval_out.join("metrics.csv")).unwrap();
    assert_eq!(replayed, original);

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn missing_config_exits_with_runtime_error() {
    let dir = temp_dir("missing");
    let status = apex()
        .args(["train", "--config", "/nonexistent/nope.toml", "--out-dir"])
        .arg(dir.join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn invalid_mode_is_a_runtime_error() {
    let dir = temp_dir("badmode");
    let config = write_tiny_config(&dir);
    // Checkpoint path invalid too, but the mode is parsed against the
    // config first; either way this must be exit 3, not a panic.
    let status = apex()
        .args(["eval", "--config"])
        .arg(&config)
        .args(["--mode", "bogus", "--checkpoint", "/nonexistent.json", "--out-dir"])
        .arg(dir.join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
    std::fs::remove_dir_all(&dir).ok();
}
