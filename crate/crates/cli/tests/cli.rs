use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "data": { "docs_per_domain": 40, "heldout_docs": 12, "doc_len": 64 },
  "mlm": { "d_model": 8, "n_layers": 1, "n_heads": 2, "ffn_dim": 16, "max_len": 64 },
  "causal": { "d_model": 8, "n_layers": 1, "n_heads": 2, "ffn_dim": 16, "max_len": 64 },
  "pretrain": { "steps": 4, "batch": 2 },
  "finetune": { "steps": 3, "batch": 2 },
  "backbone_train": { "steps": 3, "batch": 2 },
  "reference_train": { "steps": 3, "batch": 2 },
  "disc": { "train": { "steps": 20 } },
  "trainset": { "count": 6 },
  "editor": { "steps": 4 },
  "generate": { "prompts": 3, "length": 32 },
  "sweep": { "sizes": [8, 16, 32], "prompts": 1 }
}"#;

fn scope(root: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scope"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--override")
        .arg(format!("root={}", root.display()))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn setup() -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.json");
    std::fs::write(&config, TINY).unwrap();
    (dir, config)
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).expect("structured error line");
    serde_json::from_str(line).unwrap()
}

#[test]
fn full_pipeline_on_tiny_config() {
    let (dir, config) = setup();
    let root = dir.path().join("run");
    for cmd in [
        "synth-data",
        "pretrain-mlm",
        "finetune-mlm",
        "train-backbone",
        "train-disc",
        "build-trainset",
        "train-editor",
        "generate",
    ] {
        ok(scope(&root, &config, &[cmd]));
        let manifest: Value = serde_json::from_str(&std::fs::read_to_string(root.join(format!("manifests/{cmd}.json"))).unwrap()).unwrap();
        assert_eq!(manifest["command"], cmd);
        assert!(manifest["version"].as_str().is_some_and(|v| !v.is_empty()));
        assert_eq!(manifest["config"]["trainset"]["count"], 6);
        assert!(manifest["seed"].is_u64());
    }
    let out = ok(scope(&root, &config, &["evaluate"]));
    let table = String::from_utf8(out.stdout).unwrap();
    for metric in [
        "distinct-1",
        "distinct-2",
        "distinct-3",
        "accuracy",
        "held-out accuracy",
        "ppl",
        "score delta",
        "marker rate",
    ] {
        assert!(table.contains(metric), "{metric} missing from\n{table}");
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(root.join("eval_report.json")).unwrap()).unwrap();
    for arm in ["backbone", "scope"] {
        assert_eq!(report[arm]["samples"], 3);
        for key in ["distinct_2", "classifier_accuracy", "ppl", "mean_score_delta"] {
            assert!(report[arm][key].is_number(), "{arm}.{key}");
        }
    }

    let out = ok(scope(&root, &config, &["sweep-blocks"]));
    let rows: Vec<Value> = serde_json::from_str(&std::fs::read_to_string(root.join("sweep.json")).unwrap()).unwrap();
    let passes: Vec<u64> = rows.iter().map(|r| r["ledger"]["editor_passes"].as_u64().unwrap()).collect();
    assert_eq!(passes, [8, 4, 2]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("editor_passes"));
}

#[test]
fn missing_prerequisite_names_the_producing_command() {
    let (dir, config) = setup();
    let root = dir.path().join("run");
    let out = scope(&root, &config, &["pretrain-mlm"]);
    assert!(!out.status.success());
    assert_eq!(error_line(&out)["run_first"], "synth-data");

    ok(scope(&root, &config, &["synth-data"]));
    let out = scope(&root, &config, &["train-editor"]);
    assert!(!out.status.success());
    let err = error_line(&out);
    assert_eq!(err["kind"], "missing_artifact");
    assert_eq!(err["command"], "train-editor");
    assert_eq!(err["run_first"], "finetune-mlm");
    assert!(!root.join("manifests/train-editor.json").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let (dir, config) = setup();
    let read = |root: &Path| {
        [
            "data/train_a.txt",
            "data/heldout_b.txt",
            "data/vocab.txt",
            "models/pretrained/weights.bin",
            "models/pretrained/manifest.json",
        ]
        .map(|f| std::fs::read(root.join(f)).unwrap())
    };
    let mut runs = Vec::new();
    for name in ["one", "two"] {
        let root = dir.path().join(name);
        ok(scope(&root, &config, &["synth-data", "--seed", "3"]));
        ok(scope(&root, &config, &["pretrain-mlm", "--seed", "3"]));
        runs.push(read(&root));
    }
    assert!(runs[0] == runs[1]);

    let other = dir.path().join("other");
    ok(scope(&other, &config, &["synth-data", "--seed", "4"]));
    assert_ne!(std::fs::read(other.join("data/train_a.txt")).unwrap(), runs[0][0]);
}

#[test]
fn bad_configuration_fails_with_structured_error() {
    let (dir, config) = setup();
    let root = dir.path().join("run");
    let out = scope(&root, &config, &["synth-data", "--override", "edit.blocksize=3"]);
    assert!(!out.status.success());
    let err = error_line(&out);
    assert_eq!(err["kind"], "config");
    assert!(err["message"].as_str().unwrap().contains("edit.blocksize"));

    let out = scope(&root, &config, &["synth-data", "--override", "editor.top_k=2"]);
    assert!(!out.status.success());
    assert_eq!(error_line(&out)["kind"], "unsupported");
}
