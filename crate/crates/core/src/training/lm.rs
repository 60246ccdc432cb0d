//! Language-model stages: masked-LM pretraining and target fine-tuning, and
//! causal-LM training for the backbone and reference models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{train_clm_step, train_mlm_step, Adam, AdamConfig, CausalModel, MlmModel, Role};
use crate::text::TokenSeq;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Length of the random window cut from each document.
    pub window: usize,
    /// Masked-LM selection rate (ignored for causal training).
    pub mask_rate: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            steps: 1000,
            batch: 16,
            window: 64,
            mask_rate: 0.15,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl LmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.window < 2 {
            return Err(Error::Config("batch must be at least 1 and window at least 2".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.adam.lr)));
        }
        Ok(())
    }
}

/// Loss after every optimizer step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    /// Mean of the last `n` losses.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// Random windows of at most `window` tokens from random documents.
fn sample_windows(docs: &[TokenSeq], batch: usize, window: usize, rng: &mut ChaCha8Rng) -> Vec<TokenSeq> {
    (0..batch)
        .map(|_| {
            let doc = &docs[rng.random_range(0..docs.len())];
            let len = doc.len().min(window);
            let start = rng.random_range(0..=doc.len() - len);
            TokenSeq::from(&doc[start..start + len])
        })
        .collect()
}

fn usable(docs: &[TokenSeq], min_len: usize) -> Result<Vec<TokenSeq>> {
    let keep: Vec<TokenSeq> = docs.iter().filter(|d| d.len() >= min_len).cloned().collect();
    if keep.is_empty() {
        return Err(Error::NoSamples);
    }
    Ok(keep)
}

fn tag(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { detail, .. } => Error::NonFinite { step, detail },
        other => other,
    }
}

/// Masked-LM training in place. Returns the loss curve.
pub fn train_mlm(model: &mut MlmModel, docs: &[TokenSeq], cfg: &LmTrainConfig) -> Result<LossCurve> {
    cfg.validate()?;
    if cfg.steps == 0 {
        return Ok(LossCurve::default());
    }
    let docs = usable(docs, 1)?;
    let window = cfg.window.min(model.config().max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&model.net.params, cfg.adam);
    let mut curve = LossCurve::default();
    for step in 0..cfg.steps {
        let batch = sample_windows(&docs, cfg.batch, window, &mut rng);
        let loss = train_mlm_step(model, &batch, cfg.mask_rate, &mut opt, &mut rng).map_err(|e| tag(step, e))?;
        log::debug!("mlm step {step}: loss {loss:.4}");
        curve.losses.push(loss);
    }
    Ok(curve)
}

/// Masked-LM pretraining on the mixed corpus.
pub fn pretrain_mlm(model: MlmModel, docs: &[TokenSeq], cfg: &LmTrainConfig) -> Result<(MlmModel, LossCurve)> {
    let mut model = model.with_role(Role::Pretrained);
    let curve = train_mlm(&mut model, docs, cfg)?;
    Ok((model, curve))
}

/// Fine-tunes a pretrained masked LM on the target corpus. The result is
/// both the scorer and the editor initialization.
pub fn finetune_scorer(pretrained: &MlmModel, target: &[TokenSeq], cfg: &LmTrainConfig) -> Result<(MlmModel, LossCurve)> {
    if pretrained.role != Role::Pretrained {
        log::warn!("fine-tuning a model tagged `{}` rather than `pretrained`", pretrained.role);
    }
    let mut model = pretrained.with_role(Role::Scorer);
    let curve = train_mlm(&mut model, target, cfg)?;
    Ok((model, curve))
}

/// Next-token training in place.
pub fn train_causal(model: &mut CausalModel, docs: &[TokenSeq], cfg: &LmTrainConfig) -> Result<LossCurve> {
    cfg.validate()?;
    if cfg.steps == 0 {
        return Ok(LossCurve::default());
    }
    let docs = usable(docs, 2)?;
    let window = cfg.window.min(model.config().max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&model.net.params, cfg.adam);
    let mut curve = LossCurve::default();
    for step in 0..cfg.steps {
        let batch = sample_windows(&docs, cfg.batch, window, &mut rng);
        let loss = train_clm_step(model, &batch, &mut opt, &mut rng).map_err(|e| tag(step, e))?;
        log::debug!("clm step {step}: loss {loss:.4}");
        curve.losses.push(loss);
    }
    Ok(curve)
}
