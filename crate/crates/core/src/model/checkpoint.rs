//! Checkpoint directories: `manifest.json` plus `weights.bin`, a blob of
//! little-endian f32 values, row-major, in manifest tensor order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{ModelConfig, Params};
use super::{CausalModel, MlmModel, Role, TokenRules};
use crate::error::{Error, Result};
use crate::text::Vocabulary;

const FORMAT: &str = "scope-checkpoint";
const VERSION: u32 = 1;
const DTYPE: &str = "f32-le";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Mlm,
    Causal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `weights.bin`.
    pub offset: usize,
    /// Number of f32 elements.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub role: Role,
    pub config: ModelConfig,
    pub rules: TokenRules,
    pub vocab_digest: String,
    pub weights_digest: String,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Mlm(MlmModel),
    Causal(CausalModel),
}

#[derive(Clone, Copy, Debug)]
pub enum ModelRef<'a> {
    Mlm(&'a MlmModel),
    Causal(&'a CausalModel),
}

impl<'a> From<&'a MlmModel> for ModelRef<'a> {
    fn from(m: &'a MlmModel) -> Self {
        ModelRef::Mlm(m)
    }
}

impl<'a> From<&'a CausalModel> for ModelRef<'a> {
    fn from(m: &'a CausalModel) -> Self {
        ModelRef::Causal(m)
    }
}

impl<'a> ModelRef<'a> {
    fn parts(&self) -> (Architecture, &'a Params, &'a ModelConfig, &'a TokenRules, Role) {
        match *self {
            ModelRef::Mlm(m) => (Architecture::Mlm, &m.net.params, &m.net.config, &m.rules, m.role),
            ModelRef::Causal(m) => (Architecture::Causal, &m.net.params, &m.net.config, &m.rules, m.role),
        }
    }
}

/// Result of a successful load.
#[derive(Clone, Debug)]
pub struct LoadReport {
    pub manifest: Manifest,
    pub warnings: Vec<String>,
}

fn blob(params: &Params) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.num_params() * 4);
    for t in params.tensors() {
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the serialized weight blob.
pub fn weights_digest<'a>(model: impl Into<ModelRef<'a>>) -> String {
    sha256_hex(&blob(model.into().parts().1))
}

pub fn save_checkpoint<'a>(model: impl Into<ModelRef<'a>>, vocab: &Vocabulary, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    let (architecture, params, config, rules, role) = model.into().parts();
    if config.vocab_size != vocab.size() {
        return Err(Error::Architecture(format!(
            "model vocab_size {} differs from vocabulary size {}",
            config.vocab_size,
            vocab.size()
        )));
    }
    let bytes = blob(params);
    let mut offset = 0;
    let tensors = params
        .named()
        .into_iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name,
                shape: t.shape.clone(),
                offset,
                len: t.len(),
            };
            offset += t.len() * 4;
            e
        })
        .collect();
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        architecture,
        role,
        config: config.clone(),
        rules: rules.clone(),
        vocab_digest: vocab.digest(),
        weights_digest: sha256_hex(&bytes),
        dtype: DTYPE.into(),
        tensors,
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let wpath = dir.join("weights.bin");
    fs::write(&wpath, &bytes).map_err(|e| Error::io(&wpath, e))?;
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Loads and fully validates a checkpoint. Nothing is returned unless every
/// check passes. A role differing from `expected_role` only adds a warning.
pub fn load_checkpoint(dir: impl AsRef<Path>, vocab: &Vocabulary, expected_role: Option<Role>) -> Result<(AnyModel, LoadReport)> {
    let dir = dir.as_ref();
    let bad = |message: String| Error::Checkpoint {
        path: dir.to_path_buf(),
        message,
    };

    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(format!("invalid manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION || manifest.dtype != DTYPE {
        return Err(bad(format!(
            "unsupported format {} v{} ({})",
            manifest.format, manifest.version, manifest.dtype
        )));
    }
    manifest.config.validate().map_err(|e| bad(e.to_string()))?;

    let layout = Params::expected_layout(&manifest.config);
    if layout.len() != manifest.tensors.len() {
        return Err(bad(format!(
            "expected {} tensors, manifest lists {}",
            layout.len(),
            manifest.tensors.len()
        )));
    }
    let mut offset = 0;
    for ((name, shape), e) in layout.iter().zip(&manifest.tensors) {
        if &e.name != name || &e.shape != shape || e.offset != offset || e.len != shape.iter().product::<usize>() {
            return Err(bad(format!("tensor table entry {} does not match the architecture", e.name)));
        }
        offset += e.len * 4;
    }

    let wpath = dir.join("weights.bin");
    let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    if bytes.len() < offset {
        return Err(bad(format!("truncated weights blob: {} of {offset} bytes", bytes.len())));
    }
    if bytes.len() > offset {
        return Err(bad(format!("weights blob has {} trailing bytes", bytes.len() - offset)));
    }
    if sha256_hex(&bytes) != manifest.weights_digest {
        return Err(bad("weights digest mismatch".into()));
    }
    let found = vocab.digest();
    if manifest.vocab_digest != found {
        return Err(Error::VocabMismatch {
            expected: manifest.vocab_digest.clone(),
            found,
        });
    }

    let mut params = Params::zeros(&manifest.config);
    let mut chunks = bytes.chunks_exact(4);
    for t in params.tensors_mut() {
        for (v, c) in t.data.iter_mut().zip(&mut chunks) {
            *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
        }
    }

    let mut warnings = Vec::new();
    if let Some(want) = expected_role {
        if want != manifest.role {
            let w = format!("checkpoint role is {} but {} was expected", manifest.role, want);
            log::warn!("{}: {w}", dir.display());
            warnings.push(w);
        }
    }
    let cfg = manifest.config.clone();
    let rules = manifest.rules.clone();
    let model = match manifest.architecture {
        Architecture::Mlm => AnyModel::Mlm(MlmModel::from_params(cfg, params, rules, manifest.role)?),
        Architecture::Causal => AnyModel::Causal(CausalModel::from_params(cfg, params, rules, manifest.role)?),
    };
    Ok((model, LoadReport { manifest, warnings }))
}

pub fn load_mlm(dir: impl AsRef<Path>, vocab: &Vocabulary, expected_role: Option<Role>) -> Result<(MlmModel, LoadReport)> {
    match load_checkpoint(dir, vocab, expected_role)? {
        (AnyModel::Mlm(m), r) => Ok((m, r)),
        (AnyModel::Causal(_), _) => Err(Error::Architecture("expected a masked LM checkpoint, found causal".into())),
    }
}

pub fn load_causal(dir: impl AsRef<Path>, vocab: &Vocabulary, expected_role: Option<Role>) -> Result<(CausalModel, LoadReport)> {
    match load_checkpoint(dir, vocab, expected_role)? {
        (AnyModel::Causal(m), r) => Ok((m, r)),
        (AnyModel::Mlm(_), _) => Err(Error::Architecture("expected a causal LM checkpoint, found masked LM".into())),
    }
}
