//! End-to-end stages over an artifact directory. Every stage reads its
//! prerequisites from the layout under `root` and writes its outputs there.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backbone::{Backbone, HttpBackbone, HttpCompletionConfig, LocalBackbone};
use crate::editor::{EditConfig, Editing};
use crate::error::{Error, Result};
use crate::eval::{paired_compare, EvalSetup, PairedReport};
use crate::generation::{backbone_generate, block_size_sweep, derive_seed, scope_generate, CostLedger, GenerationRequest, GenerationTrace};
use crate::model::{load_causal, load_mlm, save_checkpoint, CausalModel, MlmModel, ModelConfig, Role, TokenRules};
use crate::scoring::{Discriminator, ScoreStack, ScoreWeights};
use crate::synth::{default_domains, synth_domain_corpus, DomainSpec};
use crate::text::{build_vocab, load_encoded, write_corpus, TokenId, TokenSeq, Vocabulary, DEFAULT_SPECIALS};
use crate::training::{
    build_training_set, finetune_scorer, load_training_set, pretrain_mlm, save_training_set, train_causal, train_discriminator, train_editor,
    DiscTrainConfig, EditorTrainConfig, LmTrainConfig,
};

/// Transformer shape without the vocabulary size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub distance_bias: bool,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            max_len: 64,
            dropout: 0.0,
            distance_bias: true,
        }
    }
}

impl ModelShape {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
            dropout: self.dropout,
            distance_bias: self.distance_bias,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training documents per domain.
    pub docs_per_domain: usize,
    /// Held-out documents per domain (evaluation prefixes).
    pub heldout_docs: usize,
    pub doc_len: usize,
    /// Target attribute, `A` or `B`; prompts come from the other domain.
    pub target: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            docs_per_domain: 1000,
            heldout_docs: 200,
            doc_len: 64,
            target: "A".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscConfig {
    pub train: DiscTrainConfig,
    /// Feature seed and drop rate of the held-out discriminator.
    pub heldout_feature_seed: u64,
    pub heldout_drop_rate: f64,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            train: DiscTrainConfig::default(),
            heldout_feature_seed: 7,
            heldout_drop_rate: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Local,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Sampling temperature of the local backbone.
    pub temperature: f64,
    pub http: HttpCompletionConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Local,
            temperature: 1.0,
            http: HttpCompletionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainsetConfig {
    pub count: usize,
    pub prefix_len: usize,
}

impl Default for TrainsetConfig {
    fn default() -> Self {
        TrainsetConfig { count: 2000, prefix_len: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    /// Number of held-out source-domain prompts.
    pub prompts: usize,
    pub prefix_len: usize,
    /// Continuation length `l`.
    pub length: usize,
    /// Score every editing iteration of every block.
    pub trace_scores: bool,
    pub max_context: Option<usize>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            prompts: 100,
            prefix_len: 32,
            length: 128,
            trace_scores: true,
            max_context: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub sizes: Vec<usize>,
    pub prompts: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            sizes: vec![4, 8, 16, 32],
            prompts: 4,
        }
    }
}

/// Every setting of the pipeline. Stage `seed` fields are replaced by seeds
/// derived from the global `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Artifact directory.
    pub root: PathBuf,
    pub data: DataConfig,
    pub mlm: ModelShape,
    pub causal: ModelShape,
    pub pretrain: LmTrainConfig,
    pub finetune: LmTrainConfig,
    pub backbone_train: LmTrainConfig,
    pub reference_train: LmTrainConfig,
    pub disc: DiscConfig,
    pub trainset: TrainsetConfig,
    pub editor: EditorTrainConfig,
    pub edit: EditConfig,
    pub backbone: BackboneConfig,
    pub generate: GenerateConfig,
    pub sweep: SweepConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let lm = |steps, lr, mask_rate| LmTrainConfig {
            steps,
            batch: 16,
            window: 64,
            mask_rate,
            adam: crate::model::AdamConfig { lr, ..Default::default() },
            ..Default::default()
        };
        PipelineConfig {
            seed: 0,
            root: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            mlm: ModelShape::default(),
            causal: ModelShape::default(),
            pretrain: lm(2000, 5e-3, 0.3),
            finetune: lm(2000, 2e-3, 0.3),
            backbone_train: lm(1000, 5e-3, 0.15),
            reference_train: lm(600, 5e-3, 0.15),
            disc: DiscConfig::default(),
            trainset: TrainsetConfig::default(),
            editor: EditorTrainConfig {
                batch: 4,
                steps: 6000,
                adam: crate::model::AdamConfig {
                    lr: 5e-4,
                    ..Default::default()
                },
                ..EditorTrainConfig::default()
            },
            edit: EditConfig::default(),
            backbone: BackboneConfig::default(),
            generate: GenerateConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

// Stream indices for derived seeds.
const SEED_DATA: u64 = 1;
const SEED_PRETRAIN: u64 = 2;
const SEED_FINETUNE: u64 = 3;
const SEED_BACKBONE: u64 = 4;
const SEED_REFERENCE: u64 = 5;
const SEED_TRAINSET: u64 = 6;
const SEED_EDITOR: u64 = 7;
const SEED_GENERATE: u64 = 8;
const SEED_INIT: u64 = 9;

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data.target != "A" && self.data.target != "B" {
            return Err(Error::Config(format!("data.target must be `A` or `B`, got `{}`", self.data.target)));
        }
        self.editor.validate()?;
        self.edit.validate()?;
        for c in [&self.pretrain, &self.finetune, &self.backbone_train, &self.reference_train] {
            c.validate()?;
        }
        self.mlm.with_vocab(1).validate()?;
        self.causal.with_vocab(1).validate()?;
        if self.trainset.prefix_len + self.edit.block_size > self.mlm.max_len {
            return Err(Error::Config(format!(
                "trainset.prefix_len {} + block_size {} exceeds mlm.max_len {}",
                self.trainset.prefix_len, self.edit.block_size, self.mlm.max_len
            )));
        }
        if self.generate.prefix_len > self.data.doc_len || self.trainset.prefix_len > self.data.doc_len {
            return Err(Error::Config("prefix lengths must not exceed data.doc_len".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout { root: self.root.clone() }
    }

    fn stage_seed(&self, stream: u64) -> u64 {
        derive_seed(self.seed, stream)
    }

    /// Score weights used for training and traced generation.
    pub fn weights(&self) -> &ScoreWeights {
        &self.editor.weights
    }
}

/// Artifact paths under the run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn vocab(&self) -> PathBuf {
        self.root.join("data/vocab.txt")
    }
    pub fn corpus(&self, domain: &str) -> PathBuf {
        self.root.join(format!("data/train_{}.txt", domain.to_lowercase()))
    }
    pub fn heldout(&self, domain: &str) -> PathBuf {
        self.root.join(format!("data/heldout_{}.txt", domain.to_lowercase()))
    }
    pub fn model(&self, role: Role) -> PathBuf {
        self.root.join(format!("models/{role}"))
    }
    pub fn disc(&self) -> PathBuf {
        self.root.join("disc/train.json")
    }
    pub fn heldout_disc(&self) -> PathBuf {
        self.root.join("disc/heldout.json")
    }
    pub fn trainset(&self) -> PathBuf {
        self.root.join("trainset.jsonl")
    }
    pub fn editor_report(&self) -> PathBuf {
        self.root.join("editor_report.jsonl")
    }
    pub fn generations(&self) -> PathBuf {
        self.root.join("generations")
    }
    pub fn eval_report(&self) -> PathBuf {
        self.root.join("eval_report.json")
    }
    pub fn sweep(&self) -> PathBuf {
        self.root.join("sweep.json")
    }
    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join(format!("manifests/{command}.json"))
    }
}

/// Artifacts written by a stage and a few headline numbers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub artifacts: Vec<PathBuf>,
    pub metrics: serde_json::Value,
}

fn require(path: &Path, command: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            command,
        })
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn domains(cfg: &PipelineConfig) -> (DomainSpec, DomainSpec) {
    let (a, b) = default_domains();
    if cfg.data.target == "A" {
        (a, b)
    } else {
        (b, a)
    }
}

/// Target and source domain names.
pub fn domain_names(cfg: &PipelineConfig) -> (String, String) {
    let (t, s) = domains(cfg);
    (t.name, s.name)
}

pub fn load_vocab(cfg: &PipelineConfig) -> Result<Vocabulary> {
    let path = cfg.layout().vocab();
    require(&path, "synth-data")?;
    Vocabulary::load(path)
}

fn corpus(path: PathBuf, vocab: &Vocabulary) -> Result<Vec<TokenSeq>> {
    require(&path, "synth-data")?;
    load_encoded(path, vocab)
}

fn rules(vocab: &Vocabulary) -> TokenRules {
    TokenRules::from_specials(vocab.specials())
}

fn mlm_at(cfg: &PipelineConfig, vocab: &Vocabulary, role: Role, command: &'static str) -> Result<MlmModel> {
    let path = cfg.layout().model(role);
    require(&path.join("manifest.json"), command)?;
    let (m, report) = load_mlm(path, vocab, Some(role))?;
    for w in report.warnings {
        log::warn!("{w}");
    }
    Ok(m)
}

fn causal_at(cfg: &PipelineConfig, vocab: &Vocabulary, role: Role) -> Result<CausalModel> {
    let path = cfg.layout().model(role);
    require(&path.join("manifest.json"), "train-backbone")?;
    Ok(load_causal(path, vocab, Some(role))?.0)
}

fn load_disc(path: PathBuf) -> Result<Discriminator> {
    require(&path, "train-disc")?;
    Discriminator::load(path)
}

/// Domain corpora (training and held-out) and the shared vocabulary.
pub fn synth_data(cfg: &PipelineConfig) -> Result<StageSummary> {
    cfg.validate()?;
    let l = cfg.layout();
    let (a, b) = default_domains();
    let mut artifacts = Vec::new();
    let seed = cfg.stage_seed(SEED_DATA);
    let mut corpora = Vec::new();
    for (k, spec) in [&a, &b].into_iter().enumerate() {
        let n = cfg.data.docs_per_domain + cfg.data.heldout_docs;
        let docs = synth_domain_corpus(spec, n, cfg.data.doc_len, derive_seed(seed, k as u64))?;
        let (train, held) = docs.split_at(cfg.data.docs_per_domain);
        for (path, part) in [(l.corpus(&spec.name), train), (l.heldout(&spec.name), held)] {
            ensure_parent(&path)?;
            write_corpus(&path, part)?;
            artifacts.push(path);
        }
        corpora.push(l.corpus(&spec.name));
        corpora.push(l.heldout(&spec.name));
    }
    let vocab = build_vocab(&corpora, &DEFAULT_SPECIALS)?;
    vocab.save(l.vocab())?;
    artifacts.push(l.vocab());
    Ok(StageSummary {
        artifacts,
        metrics: json!({ "vocab_size": vocab.size() }),
    })
}

fn mixed_corpus(cfg: &PipelineConfig, vocab: &Vocabulary) -> Result<Vec<TokenSeq>> {
    let l = cfg.layout();
    let mut docs = corpus(l.corpus("A"), vocab)?;
    docs.extend(corpus(l.corpus("B"), vocab)?);
    Ok(docs)
}

fn seeded(c: &LmTrainConfig, seed: u64) -> LmTrainConfig {
    LmTrainConfig { seed, ..c.clone() }
}

/// Masked LM trained on both domains.
pub fn pretrain_mlm_stage(cfg: &PipelineConfig) -> Result<StageSummary> {
    cfg.validate()?;
    let vocab = load_vocab(cfg)?;
    let docs = mixed_corpus(cfg, &vocab)?;
    let init = MlmModel::new(
        cfg.mlm.with_vocab(vocab.size()),
        rules(&vocab),
        Role::Pretrained,
        cfg.stage_seed(SEED_INIT),
    )?;
    let (model, curve) = pretrain_mlm(init, &docs, &seeded(&cfg.pretrain, cfg.stage_seed(SEED_PRETRAIN)))?;
    let path = cfg.layout().model(Role::Pretrained);
    save_checkpoint(&model, &vocab, &path)?;
    Ok(StageSummary {
        artifacts: vec![path],
        metrics: json!({ "final_loss": curve.tail_mean(20) }),
    })
}

/// Target-domain fine-tuning of the pretrained masked LM: the scorer and
/// editor initialization.
pub fn finetune_mlm_stage(cfg: &PipelineConfig) -> Result<StageSummary> {
    cfg.validate()?;
    let vocab = load_vocab(cfg)?;
    let pretrained = mlm_at(cfg, &vocab, Role::Pretrained, "pretrain-mlm")?;
    let (target, _) = domain_names(cfg);
    let docs = corpus(cfg.layout().corpus(&target), &vocab)?;
    let (scorer, curve) = finetune_scorer(&pretrained, &docs, &seeded(&cfg.finetune, cfg.stage_seed(SEED_FINETUNE)))?;
    let path = cfg.layout().model(Role::Scorer);
    save_checkpoint(&scorer, &vocab, &path)?;
    Ok(StageSummary {
        artifacts: vec![path],
        metrics: json!({ "final_loss": curve.tail_mean(20) }),
    })
}

/// Causal backbone and perplexity reference, both on the mixed corpus with
/// different seeds.
pub fn train_backbone_stage(cfg: &PipelineConfig) -> Result<StageSummary> {
    cfg.validate()?;
    let vocab = load_vocab(cfg)?;
    let docs = mixed_corpus(cfg, &vocab)?;
    let mut metrics = serde_json::Map::new();
    let mut artifacts = Vec::new();
    let jobs = [
        (Role::Backbone, &cfg.backbone_train, SEED_BACKBONE),
        (Role::Reference, &cfg.reference_train, SEED_REFERENCE),
    ];
    for (role, train, stream) in jobs {
        let seed = cfg.stage_seed(stream);
        let mut model = CausalModel::new(cfg.causal.with_vocab(vocab.size()), rules(&vocab), role, derive_seed(seed, SEED_INIT))?;
        let curve = train_causal(&mut model, &docs, &seeded(train, seed))?;
        let path = cfg.layout().model(role);
        save_checkpoint(&model, &vocab, &path)?;
        metrics.insert(format!("{role}_final_loss"), json!(curve.tail_mean(20)));
        artifacts.push(path);
    }
    Ok(StageSummary {
        artifacts,
        metrics: metrics.into(),
    })
}

/// Two discriminators (target domain positive): one on the first half of
/// each training corpus, and a held-out one on the second halves with a
/// seeded subset of features.
pub fn train_disc_stage(cfg: &PipelineConfig) -> Result<StageSummary> {
    cfg.validate()?;
    let vocab = load_vocab(cfg)?;
    let l = cfg.layout();
    let (target, source) = domain_names(cfg);
    let pos = corpus(l.corpus(&target), &vocab)?;
    let neg = corpus(l.corpus(&source), &vocab)?;
    let (p1, p2) = pos.split_at(pos.len() / 2);
    let (n1, n2) = neg.split_at(neg.len() / 2);
    let main = train_discriminator(Discriminator::zeros(vocab.size()), p1, n1, &cfg.disc.train)?;
    let held_init = Discriminator::with_feature_seed(vocab.size(), cfg.disc.heldout_feature_seed, cfg.disc.heldout_drop_rate);
    let held = train_discriminator(held_init, p2, n2, &cfg.disc.train)?;
    let hp = corpus(l.heldout(&target), &vocab)?;
    let hn = corpus(l.heldout(&source), &vocab)?;
    let acc = |d: &Discriminator| -> Result<f64> {
        let a = crate::eval::classifier_accuracy(&hp, true, d)?;
        let b = crate::eval::classifier_accuracy(&hn, false, d)?;
        Ok((a + b) / 2.0)
    };
    let metrics = json!({ "train_disc_accuracy": acc(&main)?, "heldout_disc_accuracy": acc(&held)? });
    ensure_parent(&l.disc())?;
    main.save(l.disc())?;
    held.save(l.heldout_disc())?;
    Ok(StageSummary {
        artifacts: vec![l.disc(), l.heldout_disc()],
        metrics,
    })
}

/// The configured backbone.
pub fn make_backbone(cfg: &PipelineConfig, vocab: &Vocabulary) -> Result<Box<dyn Backbone>> {
    Ok(match cfg.backbone.kind {
        BackboneKind::Local => Box::new(LocalBackbone::new(
            causal_at(cfg, vocab, Role::Backbone)?,
            vocab.clone(),
            cfg.backbone.temperature,
        )?),
        BackboneKind::Http => Box::new(HttpBackbone::new(cfg.backbone.http.clone(), vocab.clone())?),
    })
}

/// Offline editor training set from target-corpus prefixes.
pub fn build_trainset_stage(cfg: &PipelineConfig) -> Result<StageSummary> {
    cfg.validate()?;
    let vocab = load_vocab(cfg)?;
    let (target, _) = domain_names(cfg);
    let docs = corpus(cfg.layout().corpus(&target), &vocab)?;
    let backbone = make_backbone(cfg, &vocab)?;
    let t = &cfg.trainset;
    let set = build_training_set(
        &docs,
        backbone.as_ref(),
        t.count,
        t.prefix_len,
        cfg.edit.block_size,
        cfg.stage_seed(SEED_TRAINSET),
    )?;
    let path = cfg.layout().trainset();
    ensure_parent(&path)?;
    save_training_set(&path, &set)?;
    Ok(StageSummary {
        artifacts: vec![path],
        metrics: json!({ "samples": set.len() }),
    })
}

fn score_disc(cfg: &PipelineConfig) -> Result<Option<Discriminator>> {
    if cfg.weights().beta == 0.0 && cfg.weights().multi.is_none() {
        return Ok(None);
    }
    load_disc(cfg.layout().disc()).map(Some)
}

/// Editor training from the scorer, with the scorer's score as target.
pub fn train_editor_stage(cfg: &PipelineConfig) -> Result<StageSummary> {
    cfg.validate()?;
    let vocab = load_vocab(cfg)?;
    let l = cfg.layout();
    let scorer = mlm_at(cfg, &vocab, Role::Scorer, "finetune-mlm")?;
    require(&l.trainset(), "build-trainset")?;
    let disc = score_disc(cfg)?;
    let set = load_training_set(l.trainset())?;
    let stack = ScoreStack::from_weights(&scorer, disc.as_ref(), cfg.weights(), &Default::default())?;
    let tcfg = EditorTrainConfig {
        seed: cfg.stage_seed(SEED_EDITOR),
        ..cfg.editor.clone()
    };
    let report_path = l.editor_report();
    ensure_parent(&report_path)?;
    let mut log = std::io::BufWriter::new(fs::File::create(&report_path).map_err(|e| Error::io(&report_path, e))?);
    let (editor, report) = train_editor(&scorer, &set, &stack, &tcfg, Some(&mut log))?;
    std::io::Write::flush(&mut log).map_err(|e| Error::io(&report_path, e))?;
    let path = l.model(Role::Editor);
    save_checkpoint(&editor, &vocab, &path)?;
    let metrics = json!({
        "tail_mean_d": report.tail_mean_d(100),
        "zero_edit_steps": report.zero_edit_steps,
        "steps": report.steps.len(),
    });
    Ok(StageSummary {
        artifacts: vec![path, report_path],
        metrics,
    })
}

/// Evaluation prompts: the first `prefix_len` tokens of held-out source
/// documents.
pub fn prompts(cfg: &PipelineConfig, vocab: &Vocabulary, count: usize) -> Result<Vec<TokenSeq>> {
    let (_, source) = domain_names(cfg);
    let docs = corpus(cfg.layout().heldout(&source), vocab)?;
    let out: Vec<TokenSeq> = docs
        .iter()
        .filter(|d| d.len() >= cfg.generate.prefix_len)
        .take(count)
        .map(|d| TokenSeq::from(&d[..cfg.generate.prefix_len]))
        .collect();
    if out.len() < count {
        return Err(Error::Config(format!("only {} held-out prompts available, {count} requested", out.len())));
    }
    Ok(out)
}

fn request(cfg: &PipelineConfig, prefix: TokenSeq, i: usize) -> GenerationRequest {
    GenerationRequest {
        prefix,
        length: cfg.generate.length,
        edit: cfg.edit.clone(),
        seed: derive_seed(cfg.stage_seed(SEED_GENERATE), i as u64),
        max_context: cfg.generate.max_context,
    }
}

/// Writes one block file per trace plus the shared prefixes.
pub fn save_traces(dir: &Path, traces: &[GenerationTrace]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let prefixes: Vec<&TokenSeq> = traces.iter().map(|t| &t.prefix).collect();
    write_json(&dir.join("prefixes.json"), &prefixes)?;
    for (i, t) in traces.iter().enumerate() {
        t.save_jsonl(dir.join(format!("sample_{i:04}.jsonl")))?;
    }
    Ok(())
}

pub fn load_traces(dir: &Path) -> Result<Vec<GenerationTrace>> {
    let pfile = dir.join("prefixes.json");
    require(&pfile, "generate")?;
    let text = fs::read_to_string(&pfile).map_err(|e| Error::io(&pfile, e))?;
    let prefixes: Vec<TokenSeq> = serde_json::from_str(&text)?;
    prefixes
        .into_iter()
        .enumerate()
        .map(|(i, prefix)| {
            let blocks = GenerationTrace::read_blocks(dir.join(format!("sample_{i:04}.jsonl")))?;
            let ledger = blocks.last().map_or(CostLedger::default(), |b| b.ledger);
            Ok(GenerationTrace { prefix, blocks, ledger })
        })
        .collect()
}

/// Edited and plain backbone continuations of the evaluation prompts under
/// shared seeds.
pub fn generate_stage(cfg: &PipelineConfig) -> Result<StageSummary> {
    cfg.validate()?;
    let vocab = load_vocab(cfg)?;
    let editor = mlm_at(cfg, &vocab, Role::Editor, "train-editor")?;
    let scorer = if cfg.generate.trace_scores {
        Some(mlm_at(cfg, &vocab, Role::Scorer, "finetune-mlm")?)
    } else {
        None
    };
    let disc = if cfg.generate.trace_scores { score_disc(cfg)? } else { None };
    let backbone = make_backbone(cfg, &vocab)?;
    let prompts = prompts(cfg, &vocab, cfg.generate.prompts)?;
    let (scope, plain) = generate_arms(cfg, &editor, scorer.as_ref(), disc.as_ref(), backbone.as_ref(), &prompts)?;
    let dir = cfg.layout().generations();
    save_traces(&dir.join("scope"), &scope)?;
    save_traces(&dir.join("backbone"), &plain)?;
    let total = scope.iter().fold(CostLedger::default(), |a, t| add(a, t.ledger));
    Ok(StageSummary {
        artifacts: vec![dir.join("scope"), dir.join("backbone")],
        metrics: json!({ "scope_ledger": total }),
    })
}

fn add(a: CostLedger, b: CostLedger) -> CostLedger {
    CostLedger {
        editor_passes: a.editor_passes + b.editor_passes,
        scorer_masked_passes: a.scorer_masked_passes + b.scorer_masked_passes,
        backbone_calls: a.backbone_calls + b.backbone_calls,
        backbone_tokens: a.backbone_tokens + b.backbone_tokens,
    }
}

/// Both arms for `prompts`. Scores are traced for the edited arm when a
/// scorer is given.
pub fn generate_arms(
    cfg: &PipelineConfig,
    editor: &MlmModel,
    scorer: Option<&MlmModel>,
    disc: Option<&Discriminator>,
    backbone: &dyn Backbone,
    prompts: &[TokenSeq],
) -> Result<(Vec<GenerationTrace>, Vec<GenerationTrace>)> {
    let scope = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let stack = scorer
                .map(|s| ScoreStack::from_weights(s, disc, cfg.weights(), &Default::default()))
                .transpose()?;
            scope_generate(backbone, Editing::Single(editor), stack.as_ref(), &request(cfg, p.clone(), i))
        })
        .collect::<Result<Vec<_>>>()?;
    let plain = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| backbone_generate(backbone, &request(cfg, p.clone(), i)))
        .collect::<Result<Vec<_>>>()?;
    Ok((scope, plain))
}

/// The evaluation setup of a run: training and held-out discriminators, the
/// reference LM and the target markers.
pub struct EvalAssets {
    pub disc: Discriminator,
    pub heldout: Discriminator,
    pub reference: CausalModel,
    pub markers: Vec<TokenId>,
}

impl EvalAssets {
    pub fn load(cfg: &PipelineConfig, vocab: &Vocabulary) -> Result<Self> {
        let l = cfg.layout();
        let (target, _) = domains(cfg);
        let markers = target.marker_strings().iter().filter_map(|m| vocab.id(m)).collect();
        Ok(EvalAssets {
            disc: load_disc(l.disc())?,
            heldout: load_disc(l.heldout_disc())?,
            reference: causal_at(cfg, vocab, Role::Reference)?,
            markers,
        })
    }

    pub fn setup(&self, clip: f64) -> EvalSetup<'_> {
        EvalSetup {
            disc: &self.disc,
            heldout: Some(&self.heldout),
            target_positive: true,
            reference: &self.reference,
            markers: self.markers.clone(),
            clip,
        }
    }
}

/// Paired report over the generated arms.
pub fn evaluate_stage(cfg: &PipelineConfig) -> Result<(StageSummary, PairedReport)> {
    cfg.validate()?;
    let vocab = load_vocab(cfg)?;
    let dir = cfg.layout().generations();
    let scope = load_traces(&dir.join("scope"))?;
    let plain = load_traces(&dir.join("backbone"))?;
    let assets = EvalAssets::load(cfg, &vocab)?;
    let report = paired_compare(&plain, &scope, &assets.setup(cfg.weights().clip))?;
    let path = cfg.layout().eval_report();
    write_json(&path, &report)?;
    let metrics = json!({ "deltas": report.deltas });
    Ok((
        StageSummary {
            artifacts: vec![path],
            metrics,
        },
        report,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub block_size: usize,
    /// Summed over prompts.
    pub ledger: CostLedger,
    pub accuracy: f64,
}

/// Cost and accuracy per block size on the first `sweep.prompts` prompts.
pub fn sweep_blocks_stage(cfg: &PipelineConfig) -> Result<(StageSummary, Vec<SweepSummary>)> {
    cfg.validate()?;
    let vocab = load_vocab(cfg)?;
    let editor = mlm_at(cfg, &vocab, Role::Editor, "train-editor")?;
    let disc = load_disc(cfg.layout().disc())?;
    let backbone = make_backbone(cfg, &vocab)?;
    let prompts = prompts(cfg, &vocab, cfg.sweep.prompts)?;
    let mut per_size: Vec<(CostLedger, Vec<TokenSeq>)> = vec![(CostLedger::default(), Vec::new()); cfg.sweep.sizes.len()];
    for (i, p) in prompts.iter().enumerate() {
        let rows = block_size_sweep(
            backbone.as_ref(),
            Editing::Single(&editor),
            None,
            &request(cfg, p.clone(), i),
            &cfg.sweep.sizes,
        )?;
        for (slot, row) in per_size.iter_mut().zip(rows) {
            slot.0 = add(slot.0, row.ledger);
            slot.1.push(row.trace.continuation());
        }
    }
    let rows = cfg
        .sweep
        .sizes
        .iter()
        .zip(per_size)
        .map(|(&b, (ledger, conts))| {
            Ok(SweepSummary {
                block_size: b,
                ledger,
                accuracy: crate::eval::classifier_accuracy(&conts, true, &disc)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = cfg.layout().sweep();
    write_json(&path, &rows)?;
    Ok((
        StageSummary {
            artifacts: vec![path],
            metrics: json!({ "sizes": cfg.sweep.sizes }),
        },
        rows,
    ))
}

/// Runs every stage in order.
pub fn run_all(cfg: &PipelineConfig) -> Result<PairedReport> {
    synth_data(cfg)?;
    pretrain_mlm_stage(cfg)?;
    finetune_mlm_stage(cfg)?;
    train_backbone_stage(cfg)?;
    train_disc_stage(cfg)?;
    build_trainset_stage(cfg)?;
    train_editor_stage(cfg)?;
    generate_stage(cfg)?;
    Ok(evaluate_stage(cfg)?.1)
}
