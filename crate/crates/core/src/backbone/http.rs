//! Completion-style HTTP backbone.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{Backbone, BackboneError, BackboneRequest, Capabilities};
use crate::text::{TokenSeq, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpCompletionConfig {
    pub base_url: String,
    pub model_name: String,
    /// Environment variable holding the bearer token.
    pub auth_env_var: String,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub timeout_ms: u64,
    pub temperature: f64,
    /// Token-bucket refill rate; zero disables limiting.
    pub requests_per_sec: f64,
    /// Request field carrying an instruction prompt, if the endpoint has one.
    #[serde(default)]
    pub system_field: Option<String>,
}

impl Default for HttpCompletionConfig {
    fn default() -> Self {
        HttpCompletionConfig {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model_name: "default".into(),
            auth_env_var: "SCOPE_API_KEY".into(),
            max_retries: 3,
            backoff_base_ms: 500,
            timeout_ms: 30_000,
            temperature: 1.0,
            requests_per_sec: 1.0,
            system_field: None,
        }
    }
}

impl HttpCompletionConfig {
    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.timeout_ms == 0 {
            return Err(BackboneError::Config("timeout_ms must be positive".into()));
        }
        if !(self.requests_per_sec >= 0.0 && self.requests_per_sec.is_finite()) {
            return Err(BackboneError::Config("requests_per_sec must be finite and non-negative".into()));
        }
        if self.base_url.is_empty() {
            return Err(BackboneError::Config("base_url is empty".into()));
        }
        Ok(())
    }
}

/// Token bucket with capacity one: callers block until a token is available.
#[derive(Debug)]
pub struct RateLimiter {
    per_sec: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(per_sec: f64) -> Self {
        RateLimiter {
            per_sec,
            state: Mutex::new((1.0, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        if self.per_sec <= 0.0 {
            return;
        }
        let mut s = self.state.lock().unwrap_or_else(|e| e.into_inner());
        let now = Instant::now();
        let tokens = (s.0 + now.duration_since(s.1).as_secs_f64() * self.per_sec).min(1.0);
        if tokens >= 1.0 {
            *s = (tokens - 1.0, now);
            return;
        }
        let wait = Duration::from_secs_f64((1.0 - tokens) / self.per_sec);
        std::thread::sleep(wait);
        *s = (0.0, Instant::now());
    }
}

fn retryable(code: u16) -> bool {
    code == 429 || (500..600).contains(&code)
}

fn completion_once(agent: &ureq::Agent, url: &str, key: &str, body: &serde_json::Value) -> Result<(u16, String), String> {
    let mut resp = agent
        .post(url)
        .header("Authorization", format!("Bearer {key}"))
        .header("Content-Type", "application/json")
        .send(body.to_string())
        .map_err(|e| e.to_string())?;
    let code = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
    Ok((code, text))
}

/// Completion request with retries. Status 429, 5xx and transport failures
/// are retried; retry `r` (from 1) waits `backoff_base_ms · 2^(r−1)` first.
/// Other statuses and malformed bodies fail immediately.
pub fn http_generate(cfg: &HttpCompletionConfig, prompt: &str, n_tokens: usize) -> Result<String, BackboneError> {
    http_generate_with(cfg, prompt, n_tokens, None, None)
}

pub(crate) fn http_generate_with(
    cfg: &HttpCompletionConfig,
    prompt: &str,
    n_tokens: usize,
    system_prompt: Option<&str>,
    limiter: Option<&RateLimiter>,
) -> Result<String, BackboneError> {
    cfg.validate()?;
    let key = std::env::var(&cfg.auth_env_var).map_err(|_| BackboneError::Config(format!("environment variable {} is not set", cfg.auth_env_var)))?;
    let mut body = serde_json::json!({
        "model": cfg.model_name,
        "prompt": prompt,
        "max_tokens": n_tokens,
        "temperature": cfg.temperature,
    });
    if let (Some(field), Some(sys)) = (&cfg.system_field, system_prompt) {
        body[field.as_str()] = serde_json::Value::String(sys.to_string());
    }
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
        .http_status_as_error(false)
        .build()
        .into();
    let url = format!("{}/completions", cfg.base_url.trim_end_matches('/'));
    let attempts = cfg.max_retries + 1;
    let mut last = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            let delay = cfg.backoff_base_ms.saturating_mul(1u64 << (attempt - 1).min(30));
            log::warn!("completion request failed ({last}); retrying in {delay} ms");
            std::thread::sleep(Duration::from_millis(delay));
        }
        if let Some(l) = limiter {
            l.acquire();
        }
        match completion_once(&agent, &url, &key, &body) {
            Ok((200..=299, text)) => return parse_completion(&text),
            Ok((code, text)) if retryable(code) => last = format!("status {code}: {text}"),
            Ok((code, text)) => return Err(BackboneError::Status { code, body: text }),
            Err(e) => last = e,
        }
    }
    Err(BackboneError::Transport { attempts, message: last })
}

fn parse_completion(text: &str) -> Result<String, BackboneError> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| BackboneError::Protocol(format!("invalid JSON: {e}")))?;
    v.get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("text"))
        .and_then(|t| t.as_str())
        .map(str::to_string)
        .ok_or_else(|| BackboneError::Protocol("missing choices[0].text".into()))
}

/// HTTP completion endpoint behind the token-level backbone contract. The
/// prefix is decoded to text and the response re-encoded, then cut or padded
/// with UNK to exactly the requested length.
pub struct HttpBackbone {
    pub config: HttpCompletionConfig,
    vocab: Vocabulary,
    limiter: RateLimiter,
}

impl HttpBackbone {
    pub fn new(config: HttpCompletionConfig, vocab: Vocabulary) -> Result<Self, BackboneError> {
        config.validate()?;
        let limiter = RateLimiter::new(config.requests_per_sec);
        Ok(HttpBackbone { config, vocab, limiter })
    }
}

impl Backbone for HttpBackbone {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            accepts_seed: false,
            accepts_system_prompt: self.config.system_field.is_some(),
        }
    }

    fn generate(&self, req: &BackboneRequest) -> Result<TokenSeq, BackboneError> {
        let prefix = self.vocab.decode(&req.prefix).map_err(|e| BackboneError::Config(e.to_string()))?;
        let prompt = format!("{}{}", req.preamble.as_deref().unwrap_or(""), prefix);
        let text = http_generate_with(&self.config, &prompt, req.n_tokens, req.system_prompt.as_deref(), Some(&self.limiter))?;
        let mut ids = self.vocab.encode(&text).into_inner();
        ids.resize(req.n_tokens, self.vocab.specials().unk);
        Ok(TokenSeq(ids))
    }
}
