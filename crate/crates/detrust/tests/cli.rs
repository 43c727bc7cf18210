//! Black-box tests of the command-line binary: artifact layout, exit codes,
//! the insecure-group gate, and byte-reproducible outputs.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_detrust"))
}

fn write_config(dir: &Path, allow_insecure: bool) -> std::path::PathBuf {
    let path = dir.join("config.json");
    let doc = serde_json::json!({
        "parties": 4,
        "rounds": 3,
        "trust": {"local_thresholds": [2], "min_batch_size": 2},
        "group": {"lambda": 32, "seed": 9, "allow_insecure": allow_insecure},
        "dataset": {
            "kind": "synthetic",
            "classes": 2, "features": 2,
            "samples_per_party": 20, "eval_samples": 40, "noise_std": 0.5
        },
        "hyper": {"learning_rate": 0.05, "local_epochs": 1, "batch_size": 8},
        "seed": 23
    });
    std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    path
}

fn stdout_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("bad JSON ({e}): {text}"))
}

#[test]
fn run_writes_the_full_artifact_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), true);
    let out_dir = dir.path().join("out");
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = stdout_json(&out);
    assert_eq!(summary["status"], "completed");
    assert_eq!(summary["interactions"], 21); // 3*4 + 2*4 + 1

    for file in ["config.json", "metrics.csv", "interactions.json", "model.json", "report.json"] {
        assert!(out_dir.join(file).exists(), "missing {file}");
    }
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4, "header plus one row per round");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("interactions.json")).unwrap())
            .unwrap();
    assert_eq!(report["metered_total"], 21);
    assert_eq!(report["expected_total"], 21);
    assert_eq!(report["general_fl_total"], 16);
}

#[test]
fn identical_cli_runs_reproduce_identical_metric_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), true);
    for name in ["a", "b"] {
        let out = bin()
            .args(["run", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join(name))
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    let a = std::fs::read(dir.path().join("a/metrics.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/metrics.csv")).unwrap();
    assert_eq!(a, b, "metrics.csv bytes differ between identical runs");
    let ma = std::fs::read(dir.path().join("a/model.json")).unwrap();
    let mb = std::fs::read(dir.path().join("b/model.json")).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn small_groups_need_the_explicit_env_gate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), false);

    let refused = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("refused"))
        .env_remove("DETRUST_INSECURE_SMALL_GROUP")
        .output()
        .unwrap();
    assert!(!refused.status.success(), "32-bit group must be refused");
    let err = String::from_utf8_lossy(&refused.stderr);
    assert!(err.contains("error"), "stderr should carry a structured error: {err}");

    let allowed = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("allowed"))
        .env("DETRUST_INSECURE_SMALL_GROUP", "1")
        .output()
        .unwrap();
    assert!(
        allowed.status.success(),
        "{}",
        String::from_utf8_lossy(&allowed.stderr)
    );
}

#[test]
fn attack_subcommand_reports_the_blocking_defense() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), true);
    let out = bin()
        .args(["attack", "--kind", "isolation", "--target", "2", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("atk"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["attack"], "isolation");
    assert_eq!(report["outcome"]["result"], "blocked-by-inspection");
    assert!(dir.path().join("atk/attack.json").exists());
}

#[test]
fn validate_matrix_distinguishes_safe_from_leaky() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), true);
    let good = dir.path().join("good.json");
    std::fs::write(
        &good,
        r#"{"m": 2, "n": 4, "rows": [[[1,4],[1,4],[1,4],[1,4]], [[1,4],[1,4],[1,4],[1,4]]]}"#,
    )
    .unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"m": 2, "n": 4, "rows": [[[1,4],[1,4],[1,4],[1,4]], [[1,3],[1,3],[1,3],[0,1]]]}"#,
    )
    .unwrap();

    let ok = bin()
        .args(["validate-matrix", "--config"])
        .arg(&cfg)
        .arg(&good)
        .output()
        .unwrap();
    assert!(ok.status.success());
    let doc = stdout_json(&ok);
    assert_eq!(doc["ok"], true);
    assert_eq!(doc["batch_privacy"], true);

    let leaky = bin()
        .args(["validate-matrix", "--config"])
        .arg(&cfg)
        .arg(&bad)
        .output()
        .unwrap();
    assert!(!leaky.status.success());
    let doc = stdout_json(&leaky);
    assert_eq!(doc["ok"], false);
    assert_eq!(doc["batch_privacy"], false);
    assert_eq!(doc["rank_test_exposes"], serde_json::json!([4]));
}

#[test]
fn keygen_ceremony_self_test_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), true);
    let out = bin()
        .args(["keygen-ceremony", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = stdout_json(&out);
    assert_eq!(doc["parties"], 4);
    assert_eq!(doc["pairwise_seeds_symmetric"], true);
    assert_eq!(doc["roundtrip_ok"], true);
}

#[test]
fn sweep_without_values_is_a_usage_error() {
    let out = bin().args(["sweep", "--axis", "precision"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "clap usage errors exit 2");
}

#[test]
fn sweep_writes_summary_with_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), true);
    let out_dir = dir.path().join("sweep");
    let out = bin()
        .args(["sweep", "--axis", "precision", "--values", "3,4", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 3, "header plus two rows: {summary}");
    assert!(lines[1].starts_with("precision,3,completed,"));
    assert!(lines[2].starts_with("precision,4,completed,"));
    assert!(out_dir.join("precision-3/metrics.csv").exists());
    assert!(out_dir.join("precision-4/metrics.csv").exists());
}
