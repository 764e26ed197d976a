//! End-to-end tests driving the compiled binary.

use std::path::Path;
use std::process::{Command, Output};

fn emofuse(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emofuse"))
        .args(args)
        .current_dir(dir)
        .env_remove("EMOFUSE_RUNS_DIR")
        .output()
        .expect("binary runs")
}

fn write_plan(dir: &Path) -> std::path::PathBuf {
    let plan = serde_json::json!({
        "datasets": [
            { "name": "syn", "source": { "synthetic": { "spec": {
                "n": 80,
                "num_hmc_labels": 2,
                "emotion_labels": ["anger", "disgust", "fear", "joy", "sadness", "surprise", "neutral"],
                "correlation": 0.8,
                "theme_words_per_label": 4,
                "theme_noise": 0.0,
                "emotion_words_per_label": 6,
                "seed": 7
            } } } }
        ],
        "baseline": "base",
        "plans": [
            {
                "id": "base",
                "family": "baseline",
                "hmc_dataset": "syn-hmc",
                "encoder": {
                    "num_layers": 1, "hidden_dim": 8, "num_heads": 2, "ffn_dim": 16,
                    "vocab_size": 300, "max_len": 16, "dropout_rate": 0.0
                },
                "train": { "epochs": 1, "batch_size": 16, "lr": 0.001, "seed": 1, "shuffle": true },
                "seq_len": 16,
                "vocab_size": 120,
                "split_seed": 42,
                "seeds": [1, 2]
            },
            {
                "id": "inter",
                "family": "intermediate",
                "hmc_dataset": "syn-hmc",
                "emotion_dataset": "syn-emotion",
                "encoder": {
                    "num_layers": 1, "hidden_dim": 8, "num_heads": 2, "ffn_dim": 16,
                    "vocab_size": 300, "max_len": 16, "dropout_rate": 0.0
                },
                "train": { "epochs": 1, "batch_size": 16, "lr": 0.001, "seed": 1, "shuffle": true },
                "seq_len": 16,
                "vocab_size": 120,
                "split_seed": 42,
                "seeds": [1, 2]
            }
        ]
    });
    let path = dir.join("plan.json");
    std::fs::write(&path, serde_json::to_string_pretty(&plan).unwrap()).unwrap();
    path
}

#[test]
fn prepare_synthetic_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = emofuse(
        &["prepare", "--synthetic", "--out", "prep", "n=120", "rho=0.8", "seed=7"],
        dir.path(),
    );
    assert!(out.status.success(), "{out:?}");
    let prep = dir.path().join("prep");
    for file in [
        "synthetic-hmc.jsonl",
        "synthetic-emotion.jsonl",
        "synthetic-hmc.labels.json",
        "manifest.json",
    ] {
        assert!(prep.join(file).exists(), "{file} missing");
    }
    let first = std::fs::read(prep.join("manifest.json")).unwrap();
    let hmc_first = std::fs::read(prep.join("synthetic-hmc.jsonl")).unwrap();
    let out = emofuse(
        &["prepare", "--synthetic", "--out", "prep", "n=120", "rho=0.8", "seed=7"],
        dir.path(),
    );
    assert!(out.status.success());
    assert_eq!(first, std::fs::read(prep.join("manifest.json")).unwrap());
    assert_eq!(
        hmc_first,
        std::fs::read(prep.join("synthetic-hmc.jsonl")).unwrap()
    );
}

#[test]
fn prepare_input_writes_split_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("tiny.jsonl");
    let lines: Vec<String> = (0..100)
        .map(|i| format!(r#"{{"text": "post {i}", "label": "l{}"}}"#, i % 2))
        .collect();
    std::fs::write(&data, lines.join("\n")).unwrap();
    let out = emofuse(
        &["prepare", "--input", "tiny.jsonl", "--task", "single", "--out", "prep"],
        dir.path(),
    );
    assert!(out.status.success(), "{out:?}");
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("prep/tiny-split.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["train"].as_array().unwrap().len(), 80);
    assert_eq!(manifest["validation"].as_array().unwrap().len(), 10);
    assert_eq!(manifest["test"].as_array().unwrap().len(), 10);
    assert_eq!(manifest["seed"], serde_json::json!(42));
}

#[test]
fn experiment_writes_tree_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let plan = write_plan(dir.path());
    let out = emofuse(
        &[
            "experiment",
            "--plan",
            plan.to_str().unwrap(),
            "--out",
            "runs",
            "--jobs",
            "2",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{out:?}");
    let runs = dir.path().join("runs");
    for cell in ["base/1", "base/2", "inter/1", "inter/2"] {
        assert!(runs.join(cell).join("result.json").exists(), "{cell}");
    }
    assert!(runs.join("report.md").exists());
    assert!(runs.join("report.csv").exists());

    // The report regenerates bit-identically from result.json alone.
    let stored = std::fs::read_to_string(runs.join("report.md")).unwrap();
    let out = emofuse(
        &["report", "--runs", "runs", "--baseline", "base"],
        dir.path(),
    );
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), stored);

    // CSV round-trips through the reporter to identical markdown.
    let out = emofuse(
        &[
            "report",
            "--from-csv",
            runs.join("report.csv").to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), stored);
}

#[test]
fn experiment_with_failing_cell_exits_one_but_keeps_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let plan_path = write_plan(dir.path());
    // Point the second plan at a dataset name that resolves but is not
    // multi-label, so its cells fail while the baseline row survives.
    let mut plan: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&plan_path).unwrap()).unwrap();
    plan["plans"][1]["emotion_dataset"] = serde_json::json!("syn-hmc");
    std::fs::write(&plan_path, serde_json::to_string(&plan).unwrap()).unwrap();

    let out = emofuse(
        &["experiment", "--plan", plan_path.to_str().unwrap(), "--out", "runs"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1), "{out:?}");
    assert!(dir.path().join("runs/base/1/result.json").exists());
    assert!(!dir.path().join("runs/inter/1/result.json").exists());
    assert!(dir.path().join("runs/report.md").exists());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("FAILED"), "{stdout}");
}

#[test]
fn train_runs_one_cell_and_override_changes_hash() {
    let dir = tempfile::tempdir().unwrap();
    let plan = write_plan(dir.path());
    let out = emofuse(
        &[
            "train",
            "--plan",
            plan.to_str().unwrap(),
            "--plan-id",
            "base",
            "--seed",
            "1",
            "--out",
            "runs-a",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{out:?}");
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("macro-F1"), "{stdout}");

    let record_a: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("runs-a/base/1/result.json")).unwrap(),
    )
    .unwrap();

    let out = emofuse(
        &[
            "train",
            "--plan",
            plan.to_str().unwrap(),
            "--plan-id",
            "base",
            "--seed",
            "1",
            "--out",
            "runs-b",
            "--override",
            "plans.0.train.lr=0.0001",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{out:?}");
    let record_b: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("runs-b/base/1/result.json")).unwrap(),
    )
    .unwrap();
    assert_ne!(record_a["config_hash"], record_b["config_hash"]);
}

#[test]
fn runs_dir_env_var_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let plan = write_plan(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_emofuse"))
        .args(["experiment", "--plan", plan.to_str().unwrap(), "--seeds", "1"])
        .current_dir(dir.path())
        .env("EMOFUSE_RUNS_DIR", dir.path().join("env-runs"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{out:?}");
    assert!(dir.path().join("env-runs/base/1/result.json").exists());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("significance"), "{stderr}");
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = emofuse(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = emofuse(&["report", "--format"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_override_path_fails() {
    let dir = tempfile::tempdir().unwrap();
    let plan = write_plan(dir.path());
    let out = emofuse(
        &[
            "train",
            "--plan",
            plan.to_str().unwrap(),
            "--override",
            "plans.0.no_such_key=1",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("no_such_key"), "{stderr}");
}
