//! Black-box generators. Editing and scoring only ever see the tokens a
//! backbone returns, never its logits or parameters.

mod http;
pub mod stub;

pub use http::{http_generate, HttpBackbone, HttpCompletionConfig, RateLimiter};

use serde::{Deserialize, Serialize};

use crate::model::{causal_generate, CausalModel};
use crate::text::{TokenId, TokenSeq, Vocabulary};

#[derive(Debug, thiserror::Error)]
pub enum BackboneError {
    #[error("backbone configuration: {0}")]
    Config(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("request rejected with status {code}: {body}")]
    Status { code: u16, body: String },
    #[error("local model: {0}")]
    Model(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub accepts_seed: bool,
    pub accepts_system_prompt: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BackboneRequest {
    pub prefix: Vec<TokenId>,
    pub n_tokens: usize,
    pub seed: u64,
    /// Instruction for backbones with a dedicated prompt field.
    pub system_prompt: Option<String>,
    /// Text placed before the decoded prefix.
    pub preamble: Option<String>,
}

pub trait Backbone: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    /// Continuation of exactly `req.n_tokens` tokens.
    fn generate(&self, req: &BackboneRequest) -> Result<TokenSeq, BackboneError>;
}

/// Toy causal LM behind the backbone contract.
pub struct LocalBackbone {
    model: CausalModel,
    vocab: Vocabulary,
    pub temperature: f64,
}

impl LocalBackbone {
    pub fn new(model: CausalModel, vocab: Vocabulary, temperature: f64) -> Result<Self, BackboneError> {
        if model.config().vocab_size != vocab.size() {
            return Err(BackboneError::Config(format!(
                "model vocab_size {} differs from vocabulary size {}",
                model.config().vocab_size,
                vocab.size()
            )));
        }
        Ok(LocalBackbone { model, vocab, temperature })
    }
}

/// Local generation: ancestral sampling from the causal LM, with the context
/// cut from the left so that prompt and continuation fit in `max_len`.
pub fn local_generate(model: &CausalModel, prefix: &[TokenId], n: usize, temperature: f64, seed: u64) -> Result<TokenSeq, BackboneError> {
    let max = model.config().max_len;
    if n >= max {
        return Err(BackboneError::Config(format!("cannot generate {n} tokens with max_len {max}")));
    }
    let keep = prefix.len().min(max - n);
    causal_generate(model, &prefix[prefix.len() - keep..], n, temperature, seed).map_err(|e| BackboneError::Model(e.to_string()))
}

impl Backbone for LocalBackbone {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            accepts_seed: true,
            accepts_system_prompt: false,
        }
    }

    fn generate(&self, req: &BackboneRequest) -> Result<TokenSeq, BackboneError> {
        let mut prompt = match &req.preamble {
            Some(p) => self.vocab.encode(p).into_inner(),
            None => Vec::new(),
        };
        prompt.extend_from_slice(&req.prefix);
        local_generate(&self.model, &prompt, req.n_tokens, self.temperature, req.seed)
    }
}

/// Returns a fixed token pattern, repeated or cut to the requested length.
pub struct FixedBackbone {
    pub tokens: Vec<TokenId>,
}

impl Backbone for FixedBackbone {
    fn capabilities(&self) -> Capabilities {
        Capabilities::default()
    }

    fn generate(&self, req: &BackboneRequest) -> Result<TokenSeq, BackboneError> {
        if self.tokens.is_empty() {
            return Err(BackboneError::Config("fixed backbone has no tokens".into()));
        }
        Ok(self.tokens.iter().copied().cycle().take(req.n_tokens).collect())
    }
}

/// Adds an instruction prompt to every request: through the dedicated field
/// when the inner backbone has one, otherwise as text before the prefix.
pub struct PromptedBackbone<B> {
    pub inner: B,
    pub system_prompt: String,
    pub separator: String,
}

impl<B: Backbone> PromptedBackbone<B> {
    pub fn new(inner: B, system_prompt: impl Into<String>) -> Self {
        PromptedBackbone {
            inner,
            system_prompt: system_prompt.into(),
            separator: "\n".into(),
        }
    }

    /// The request actually sent to the inner backbone.
    pub fn wrap(&self, req: &BackboneRequest) -> BackboneRequest {
        let mut out = req.clone();
        if self.system_prompt.is_empty() {
            return out;
        }
        if self.inner.capabilities().accepts_system_prompt {
            out.system_prompt = Some(self.system_prompt.clone());
        } else {
            let rest = req.preamble.as_deref().unwrap_or("");
            out.preamble = Some(format!("{}{}{}", self.system_prompt, self.separator, rest));
        }
        out
    }
}

/// Delegates to `inner` with `system_prompt` attached.
pub fn prompted_generate<B: Backbone>(inner: &PromptedBackbone<B>, req: &BackboneRequest) -> Result<TokenSeq, BackboneError> {
    inner.inner.generate(&inner.wrap(req))
}

impl<B: Backbone> Backbone for PromptedBackbone<B> {
    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn generate(&self, req: &BackboneRequest) -> Result<TokenSeq, BackboneError> {
        prompted_generate(self, req)
    }
}

impl<B: Backbone + ?Sized> Backbone for Box<B> {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }

    fn generate(&self, req: &BackboneRequest) -> Result<TokenSeq, BackboneError> {
        (**self).generate(req)
    }
}

impl<B: Backbone + ?Sized> Backbone for &B {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }

    fn generate(&self, req: &BackboneRequest) -> Result<TokenSeq, BackboneError> {
        (**self).generate(req)
    }
}
