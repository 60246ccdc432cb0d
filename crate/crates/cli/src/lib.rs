//! Configuration loading, stage dispatch and run manifests for the `scope`
//! binary.
//!
//! Settings are resolved in this order, later sources winning: built-in
//! defaults, the `--config` file, `--override key=value` pairs in the order
//! given, and finally `--seed`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::ValueEnum;
use serde::Serialize;
use serde_json::{json, Map, Value};

use scope_core::pipeline::{self, PipelineConfig, StageSummary};

pub const VERSION: &str = env!("SCOPE_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    SynthData,
    PretrainMlm,
    FinetuneMlm,
    TrainBackbone,
    TrainDisc,
    BuildTrainset,
    TrainEditor,
    Generate,
    Evaluate,
    SweepBlocks,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::SynthData => "synth-data",
            Stage::PretrainMlm => "pretrain-mlm",
            Stage::FinetuneMlm => "finetune-mlm",
            Stage::TrainBackbone => "train-backbone",
            Stage::TrainDisc => "train-disc",
            Stage::BuildTrainset => "build-trainset",
            Stage::TrainEditor => "train-editor",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
            Stage::SweepBlocks => "sweep-blocks",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Bad config file, override or resolved configuration.
    Config(String),
    Core(scope_core::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for CliError {}

impl From<scope_core::Error> for CliError {
    fn from(e: scope_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Core(e) => e.kind(),
        }
    }

    /// One-line JSON description for stderr.
    pub fn to_json(&self, command: &str) -> Value {
        let mut v = json!({ "level": "error", "command": command, "kind": self.kind(), "message": self.to_string() });
        if let CliError::Core(scope_core::Error::MissingArtifact { path, command: producer }) = self {
            v["missing"] = json!(path);
            v["run_first"] = json!(producer);
        }
        v
    }
}

/// Sets the dotted `key` in `root` to `value`. The value is parsed as JSON
/// when possible and taken as a string otherwise. Every key along the path
/// must already exist, except beneath a `null` (an unset optional section).
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CliError::Config(format!("override `{assignment}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("`{}` is not a section", parts[..i].join("."))))?;
        let fresh = obj.is_empty();
        if !fresh && !obj.contains_key(*part) {
            return Err(CliError::Config(format!("unknown config key `{key}`")));
        }
        if i + 1 == parts.len() {
            obj.insert((*part).to_owned(), value);
            return Ok(());
        }
        node = obj.entry(*part).or_insert(Value::Null);
    }
    unreachable!("split always yields at least one part")
}

/// Resolves the configuration from defaults, an optional file, overrides and
/// an optional seed.
pub fn resolve_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<PipelineConfig, CliError> {
    let base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<PipelineConfig>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    let mut value = serde_json::to_value(&base).map_err(|e| CliError::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let mut cfg: PipelineConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one stage. Returns its summary and any text meant for stdout.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<(StageSummary, Option<String>), CliError> {
    let out = match stage {
        Stage::SynthData => (pipeline::synth_data(cfg)?, None),
        Stage::PretrainMlm => (pipeline::pretrain_mlm_stage(cfg)?, None),
        Stage::FinetuneMlm => (pipeline::finetune_mlm_stage(cfg)?, None),
        Stage::TrainBackbone => (pipeline::train_backbone_stage(cfg)?, None),
        Stage::TrainDisc => (pipeline::train_disc_stage(cfg)?, None),
        Stage::BuildTrainset => (pipeline::build_trainset_stage(cfg)?, None),
        Stage::TrainEditor => (pipeline::train_editor_stage(cfg)?, None),
        Stage::Generate => (pipeline::generate_stage(cfg)?, None),
        Stage::Evaluate => {
            let (summary, report) = pipeline::evaluate_stage(cfg)?;
            (summary, Some(report.table()))
        }
        Stage::SweepBlocks => {
            let (summary, rows) = pipeline::sweep_blocks_stage(cfg)?;
            let mut table = format!("{:>6} {:>14} {:>14} {:>10}\n", "block", "editor_passes", "backbone_calls", "accuracy");
            for r in &rows {
                let _ = writeln!(
                    table,
                    "{:>6} {:>14} {:>14} {:>10.4}",
                    r.block_size, r.ledger.editor_passes, r.ledger.backbone_calls, r.accuracy
                );
            }
            (summary, Some(table))
        }
    };
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub seed: u64,
    pub config: &'a PipelineConfig,
    pub artifacts: &'a [PathBuf],
    pub metrics: &'a Value,
    pub finished_unix: u64,
}

/// Writes the manifest of a finished stage and returns its path.
pub fn write_manifest(stage: Stage, cfg: &PipelineConfig, summary: &StageSummary) -> Result<PathBuf, CliError> {
    let manifest = RunManifest {
        command: stage.name(),
        version: VERSION,
        seed: cfg.seed,
        config: cfg,
        artifacts: &summary.artifacts,
        metrics: &summary.metrics,
        finished_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    let path = cfg.layout().manifest(stage.name());
    let io = |e: std::io::Error| {
        CliError::Core(scope_core::Error::Io {
            path: path.clone(),
            source: e,
        })
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Core(e.into()))?;
    std::fs::write(&path, text + "\n").map_err(io)?;
    Ok(path)
}
