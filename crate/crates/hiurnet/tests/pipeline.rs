//! End-to-end tests of the command-line pipeline against a small world.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_hiurnet")
}

struct RunOutput {
    status: i32,
    stdout: String,
    stderr: String,
}

fn run(args: &[&str]) -> RunOutput {
    run_with_env(args, &[])
}

fn run_with_env(args: &[&str], env: &[(&str, &str)]) -> RunOutput {
    let mut cmd = Command::new(bin());
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    let output = cmd.output().expect("spawn hiurnet binary");
    RunOutput {
        status: output.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&output.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
    }
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("hiurnet-pipeline").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Generate, split, and train a small world; returns the data directory.
fn trained_world(name: &str) -> PathBuf {
    let dir = fresh_dir(name);
    let d = dir.to_str().unwrap();
    for args in [
        vec![
            "gen-synth",
            "--out",
            d,
            "--seed",
            "4",
            "--cities",
            "4",
            "--grid-side",
            "3",
        ],
        vec!["build-graph", "--data", d, "--seed", "4"],
        vec![
            "train",
            "--data",
            d,
            "--seed",
            "4",
            "--epochs",
            "10",
            "--embed-dim",
            "8",
            "--heads",
            "2",
            "--layers",
            "1",
        ],
    ] {
        let out = run(&args);
        assert_eq!(out.status, 0, "{args:?}: {}", out.stderr);
    }
    dir
}

#[test]
fn evaluate_prints_exactly_three_task_blocks() {
    let dir = trained_world("eval-blocks");
    let ckpt = dir.join("checkpoint.ckpt");
    let out = run(&[
        "evaluate",
        "--data",
        dir.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(out.status, 0, "{}", out.stderr);

    let blocks: Vec<&str> = out.stdout.lines().filter(|l| l.starts_with('[')).collect();
    assert_eq!(blocks, vec!["[C2M]", "[M2C]", "[M2M]"]);
    for field in ["rmse=", "mae=", "pcc="] {
        let count = out.stdout.lines().filter(|l| l.starts_with(field)).count();
        assert_eq!(
            count, 3,
            "expected {field} once per task block:\n{}",
            out.stdout
        );
    }
    assert!(dir.join("eval-report.json").exists());
}

#[test]
fn train_prints_progress_lines() {
    let dir = fresh_dir("progress");
    let d = dir.to_str().unwrap();
    assert_eq!(
        run(&[
            "gen-synth",
            "--out",
            d,
            "--seed",
            "2",
            "--cities",
            "3",
            "--grid-side",
            "3"
        ])
        .status,
        0
    );
    assert_eq!(run(&["build-graph", "--data", d]).status, 0);
    let out = run(&[
        "train",
        "--data",
        d,
        "--epochs",
        "3",
        "--embed-dim",
        "8",
        "--heads",
        "2",
        "--layers",
        "1",
    ]);
    assert_eq!(out.status, 0, "{}", out.stderr);
    for epoch in 0..3 {
        assert!(
            out.stdout.contains(&format!("epoch={epoch} loss=")),
            "missing epoch {epoch} line:\n{}",
            out.stdout
        );
    }
    assert!(out.stdout.contains("val_rmse="));
    assert!(dir.join("history.csv").exists());
}

#[test]
fn explain_emits_at_most_k_target_edges() {
    let dir = trained_world("explain-k");
    let ckpt = dir.join("checkpoint.ckpt");
    let out = run(&[
        "explain",
        "--data",
        dir.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--city",
        "3",
        "--k",
        "10",
        "--steps",
        "8",
    ]);
    assert_eq!(out.status, 0, "{}", out.stderr);
    let edge_lines = out
        .stdout
        .lines()
        .filter(|l| l.starts_with("edge "))
        .count();
    assert!(
        edge_lines <= 10,
        "more than k target edges:\n{}",
        out.stdout
    );
    assert!(out
        .stdout
        .lines()
        .next()
        .unwrap()
        .starts_with("target_edges="));
    assert!(dir.join("attribution.csv").exists());

    let csv = std::fs::read_to_string(dir.join("attribution.csv")).unwrap();
    assert!(csv.starts_with("grid_id,category,attribution\n"));
}

#[test]
fn geo_trained_checkpoint_evaluates() {
    let dir = fresh_dir("geo");
    let d = dir.to_str().unwrap();
    assert_eq!(
        run(&[
            "gen-synth",
            "--out",
            d,
            "--seed",
            "6",
            "--cities",
            "4",
            "--grid-side",
            "3"
        ])
        .status,
        0
    );
    assert_eq!(run(&["build-graph", "--data", d, "--geo"]).status, 0);
    let out = run(&[
        "train",
        "--data",
        d,
        "--epochs",
        "4",
        "--embed-dim",
        "8",
        "--heads",
        "2",
        "--layers",
        "1",
        "--geo",
    ]);
    assert_eq!(out.status, 0, "{}", out.stderr);
    // The geo-aware model rebuilds its geo edges at evaluation time from the
    // checkpoint manifest alone.
    let ckpt = dir.join("checkpoint.ckpt");
    let out = run(&[
        "evaluate",
        "--data",
        d,
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(out.status, 0, "{}", out.stderr);

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("graph-summary.json")).unwrap())
            .unwrap();
    assert!(summary["edges"]["geo"].as_u64().unwrap() > 0);
}

#[test]
fn gravity_pipeline_runs() {
    let dir = trained_world("gravity");
    let d = dir.to_str().unwrap();
    let out = run(&[
        "gravity-train",
        "--data",
        d,
        "--epochs",
        "20",
        "--seed",
        "4",
    ]);
    assert_eq!(out.status, 0, "{}", out.stderr);
    let ckpt = dir.join("gravity.ckpt");
    assert!(ckpt.exists());
    let out = run(&[
        "gravity-evaluate",
        "--data",
        d,
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(out.status, 0, "{}", out.stderr);
    let blocks: Vec<&str> = out.stdout.lines().filter(|l| l.starts_with('[')).collect();
    assert_eq!(blocks, vec!["[C2M]", "[M2C]", "[M2M]"]);
}

#[test]
fn env_seed_overrides_config() {
    let dir_a = fresh_dir("env-seed-a");
    let dir_b = fresh_dir("env-seed-b");
    // Same CLI seed, different env seed: worlds must differ.
    let out = run_with_env(
        &[
            "gen-synth",
            "--out",
            dir_a.to_str().unwrap(),
            "--seed",
            "1",
            "--cities",
            "2",
            "--grid-side",
            "2",
        ],
        &[("HIURNET_SEED", "777")],
    );
    assert_eq!(out.status, 0, "{}", out.stderr);
    assert!(
        out.stdout.contains("seed=777"),
        "env seed should win: {}",
        out.stdout
    );
    let out = run(&[
        "gen-synth",
        "--out",
        dir_b.to_str().unwrap(),
        "--seed",
        "777",
        "--cities",
        "2",
        "--grid-side",
        "2",
    ]);
    assert_eq!(out.status, 0);
    // Env-seeded and flag-seeded runs with the same effective seed agree.
    assert_eq!(
        std::fs::read(dir_a.join("flows.csv")).unwrap(),
        std::fs::read(dir_b.join("flows.csv")).unwrap()
    );
}

#[test]
fn config_file_drives_generation_and_flags_override() {
    let dir = fresh_dir("config-file");
    let config_path = dir.join("run.toml");
    std::fs::write(
        &config_path,
        "[world]\nn_cities = 3\ngrid_side = 2\nseed = 12\n",
    )
    .unwrap();
    let out = run(&[
        "--config",
        config_path.to_str().unwrap(),
        "gen-synth",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status, 0, "{}", out.stderr);
    assert!(out.stdout.contains("cities=3"), "{}", out.stdout);
    assert!(out.stdout.contains("seed=12"), "{}", out.stdout);

    // A flag beats the file.
    let out = run(&[
        "--config",
        config_path.to_str().unwrap(),
        "gen-synth",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "99",
    ]);
    assert_eq!(out.status, 0);
    assert!(out.stdout.contains("seed=99"), "{}", out.stdout);
}

#[test]
fn error_exit_codes_by_class() {
    // Usage error: unknown subcommand.
    let out = run(&["no-such-command"]);
    assert_eq!(out.status, 1);
    assert!(out.stderr.starts_with("error: "));
    assert_eq!(
        out.stderr.lines().count(),
        1,
        "single-line error: {}",
        out.stderr
    );

    // Config error: unknown key, names key and line.
    let dir = fresh_dir("errors");
    let config_path = dir.join("bad.toml");
    std::fs::write(&config_path, "[world]\nn_cities = 4\nwhatever = 1\n").unwrap();
    let out = run(&[
        "--config",
        config_path.to_str().unwrap(),
        "gen-synth",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status, 1);
    assert!(out.stderr.contains("whatever"), "{}", out.stderr);
    assert!(out.stderr.contains("line 3"), "{}", out.stderr);

    // Data error: missing input files.
    let out = run(&["build-graph", "--data", dir.join("nope").to_str().unwrap()]);
    assert_eq!(out.status, 2);
    assert_eq!(out.stderr.lines().count(), 1);
}

#[test]
fn split_file_is_leakage_safe_on_disk() {
    let dir = trained_world("split-disk");
    let split = std::fs::read_to_string(dir.join("split.csv")).unwrap();
    let mut train = std::collections::HashSet::new();
    let mut held_out = Vec::new();
    for line in split.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let key = (
            fields[0].to_string(),
            fields[1].to_string(),
            fields[2].to_string(),
            fields[3].to_string(),
        );
        match fields[4] {
            "train" => {
                train.insert(key);
            }
            _ => held_out.push(key),
        }
    }
    assert!(!held_out.is_empty());
    for key in held_out {
        assert!(
            !train.contains(&key),
            "record in both train and held-out: {key:?}"
        );
    }
}

fn read_dir_sorted(path: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(path)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn gen_synth_writes_declared_artifacts() {
    let dir = fresh_dir("artifacts");
    let out = run(&[
        "gen-synth",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "3",
        "--cities",
        "2",
        "--grid-side",
        "2",
    ]);
    assert_eq!(out.status, 0, "{}", out.stderr);
    assert_eq!(
        read_dir_sorted(&dir),
        vec![
            "coords.csv",
            "flows.csv",
            "inclusion.csv",
            "indicators.csv",
            "world-manifest.json"
        ]
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("world-manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["seed"], 3);
}
