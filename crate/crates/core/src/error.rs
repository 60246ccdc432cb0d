use std::path::PathBuf;

use thiserror::Error;

use crate::backbone::BackboneError;
use crate::generation::GenerationTrace;
use crate::text::TokenId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("no tokens")]
    NoTokens,

    #[error("no samples")]
    NoSamples,

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: TokenId, size: usize },

    #[error("invalid domain spec: {0}")]
    InvalidDomain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence of length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("sequence contains the mask token at position {0}")]
    MaskInInput(usize),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("block {start}..{end} outside sequence of length {len}")]
    BlockOutOfRange { start: usize, end: usize, len: usize },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("vocabulary digest mismatch: checkpoint has {expected}, vocabulary is {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("unknown score component `{0}`")]
    UnknownScore(String),

    #[error(transparent)]
    Backbone(#[from] BackboneError),

    #[error("generation aborted after {} completed blocks: {source}", partial.blocks.len())]
    GenerationAborted {
        partial: Box<GenerationTrace>,
        #[source]
        source: BackboneError,
    },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("missing {}: run `{command}` first", path.display())]
    MissingArtifact { path: PathBuf, command: &'static str },

    #[error("stage order violated: {0}")]
    StageOrder(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::NoTokens => "no_tokens",
            Error::NoSamples => "no_samples",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::InvalidDomain(_) => "invalid_domain",
            Error::Config(_) => "config",
            Error::TooLong { .. } => "too_long",
            Error::Empty(_) => "empty",
            Error::MaskInInput(_) => "mask_in_input",
            Error::LengthMismatch(_) => "length_mismatch",
            Error::BlockOutOfRange { .. } => "block_out_of_range",
            Error::Checkpoint { .. } => "checkpoint",
            Error::VocabMismatch { .. } => "vocab_mismatch",
            Error::Architecture(_) => "architecture",
            Error::UnknownScore(_) => "unknown_score",
            Error::Backbone(_) => "backbone",
            Error::GenerationAborted { .. } => "generation_aborted",
            Error::NonFinite { .. } => "non_finite",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::StageOrder(_) => "stage_order",
            Error::Unsupported(_) => "unsupported",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
