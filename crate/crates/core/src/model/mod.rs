//! Toy transformer models: a bidirectional masked LM (scorer and editor) and
//! a causal LM (backbone and perplexity reference).

mod checkpoint;
mod optim;
mod params;
mod train;
mod transformer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_causal, load_checkpoint, load_mlm, save_checkpoint, weights_digest, AnyModel, LoadReport, Manifest, TensorEntry};
pub use optim::{Adam, AdamConfig};
pub use params::{LayerParams, ModelConfig, Params, Tensor};
pub use train::{clm_loss, clm_loss_and_grad, mask_batch, mlm_loss, mlm_loss_and_grad, train_clm_step, train_mlm_step, MaskedBatch};
pub use transformer::{ForwardCache, KvCache, Logits, Transformer};

use crate::error::{Error, Result};
use crate::tensor::masked_softmax;
use crate::text::{SpecialIds, TokenId, TokenSeq};

/// What a checkpoint is used for. Metadata only; it never changes behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// MLM trained on the mixed corpus, before target fine-tuning.
    Pretrained,
    /// Target-fine-tuned MLM used for scoring.
    Scorer,
    Editor,
    Backbone,
    Reference,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Role::Pretrained => "pretrained",
            Role::Scorer => "scorer",
            Role::Editor => "editor",
            Role::Backbone => "backbone",
            Role::Reference => "reference",
        };
        f.write_str(s)
    }
}

/// Token ids a model must treat specially.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRules {
    /// Id substituted at masked positions. Required for MLM scoring/training.
    pub mask: Option<TokenId>,
    /// Ids never produced by sampling.
    pub suppressed: Vec<TokenId>,
}

impl TokenRules {
    pub fn from_specials(s: SpecialIds) -> Self {
        TokenRules {
            mask: Some(s.mask),
            suppressed: s.never_sampled(),
        }
    }

    pub fn allows(&self, id: usize) -> bool {
        !self.suppressed.contains(&(id as TokenId))
    }
}

/// Bidirectional masked language model.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmModel {
    pub net: Transformer,
    pub rules: TokenRules,
    pub role: Role,
}

/// Left-to-right language model.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalModel {
    pub net: Transformer,
    pub rules: TokenRules,
    pub role: Role,
}

impl MlmModel {
    pub fn new(config: ModelConfig, rules: TokenRules, role: Role, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(MlmModel {
            net: Transformer::new(config, false, &mut rng)?,
            rules,
            role,
        })
    }

    pub fn from_params(config: ModelConfig, params: Params, rules: TokenRules, role: Role) -> Result<Self> {
        Ok(MlmModel {
            net: Transformer::from_params(config, params, false)?,
            rules,
            role,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    /// Copy of this model carrying a different role tag.
    pub fn with_role(&self, role: Role) -> Self {
        MlmModel { role, ..self.clone() }
    }

    pub fn mask_id(&self) -> Result<TokenId> {
        self.rules.mask.ok_or_else(|| Error::Config("model has no mask token".into()))
    }

    /// Sampling distribution at one position, with suppressed ids zeroed.
    pub fn token_probs(&self, logits: &[f64], temperature: f64) -> Vec<f64> {
        masked_softmax(logits, |i| self.rules.allows(i), temperature)
    }
}

/// `[T × vocab]` logits of the MLM on an unmasked sequence.
pub fn mlm_forward(model: &MlmModel, seq: &[TokenId]) -> Result<Logits> {
    model.net.forward(seq)
}

impl CausalModel {
    pub fn new(config: ModelConfig, rules: TokenRules, role: Role, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(CausalModel {
            net: Transformer::new(config, true, &mut rng)?,
            rules,
            role,
        })
    }

    pub fn from_params(config: ModelConfig, params: Params, rules: TokenRules, role: Role) -> Result<Self> {
        Ok(CausalModel {
            net: Transformer::from_params(config, params, true)?,
            rules,
            role,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }
}

/// Draws an index from `probs` with one uniform variate. Entries with zero
/// probability are never returned.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Samples a token from `softmax(logits / temperature)` restricted to ids
/// allowed by `rules`. A non-positive temperature selects the argmax (lowest
/// id on ties). Always consumes exactly one variate from `rng`.
pub fn sample_token(logits: &[f64], temperature: f64, rules: &TokenRules, rng: &mut impl Rng) -> TokenId {
    let u: f64 = rng.random();
    if temperature <= 0.0 {
        let mut best = None;
        for (i, &l) in logits.iter().enumerate() {
            if rules.allows(i) && best.is_none_or(|(_, b)| l > b) {
                best = Some((i, l));
            }
        }
        return best.map(|(i, _)| i as TokenId).unwrap_or(0);
    }
    let probs = masked_softmax(logits, |i| rules.allows(i), temperature);
    sample_index(&probs, u) as TokenId
}

/// Ancestral sampling of `n` tokens after `prefix`, deterministic under
/// `seed`. Uses key/value caching; the sampled tokens are identical to those
/// obtained by re-running the full forward at every step.
pub fn causal_generate(model: &CausalModel, prefix: &[TokenId], n: usize, temperature: f64, seed: u64) -> Result<TokenSeq> {
    if prefix.is_empty() {
        return Err(Error::Empty("prefix"));
    }
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    model.net.check_input(prefix)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache = model.net.empty_cache();
    let mut logits = model.net.extend(&mut cache, prefix)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let tok = sample_token(&logits, temperature, &model.rules, &mut rng);
        out.push(tok);
        if i + 1 < n {
            logits = model.net.extend(&mut cache, &[tok])?;
        }
    }
    Ok(TokenSeq(out))
}
