//! Vocabulary, whitespace tokenization and corpus files.
//!
//! Corpus files hold one document per line. Vocabulary files hold one token
//! per line; the line number is the token id. The five special tokens always
//! occupy ids `0..5` in the order pad, mask, bos, eos, unk.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Names used for the special tokens when none are given explicitly.
pub const DEFAULT_SPECIALS: [&str; 5] = ["<pad>", "<mask>", "<bos>", "<eos>", "<unk>"];

/// A sequence of token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn new() -> Self {
        TokenSeq(Vec::new())
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }

    /// `self ‖ other`
    pub fn concat(&self, other: &[TokenId]) -> TokenSeq {
        let mut ids = Vec::with_capacity(self.0.len() + other.len());
        ids.extend_from_slice(&self.0);
        ids.extend_from_slice(other);
        TokenSeq(ids)
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(ids: Vec<TokenId>) -> Self {
        TokenSeq(ids)
    }
}

impl From<&[TokenId]> for TokenSeq {
    fn from(ids: &[TokenId]) -> Self {
        TokenSeq(ids.to_vec())
    }
}

impl FromIterator<TokenId> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = TokenId>>(iter: I) -> Self {
        TokenSeq(iter.into_iter().collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: TokenId,
    pub mask: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
    pub unk: TokenId,
}

impl SpecialIds {
    pub fn all(&self) -> [TokenId; 5] {
        [self.pad, self.mask, self.bos, self.eos, self.unk]
    }

    /// Ids that sampling must never emit. UNK stays sampleable so that
    /// backbones re-encoding foreign text remain representable.
    pub fn never_sampled(&self) -> Vec<TokenId> {
        vec![self.pad, self.mask, self.bos, self.eos]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    specials: SpecialIds,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered token list whose first five
    /// entries are the special tokens in role order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < DEFAULT_SPECIALS.len() {
            return Err(Error::Config(format!(
                "vocabulary needs at least {} special tokens, got {}",
                DEFAULT_SPECIALS.len(),
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid token {tok:?} at id {i}")));
            }
            if index.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            specials: SpecialIds {
                pad: 0,
                mask: 1,
                bos: 2,
                eos: 3,
                unk: 4,
            },
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.specials.all().contains(&id)
    }

    /// Ids of all non-special tokens.
    pub fn content_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.size() as TokenId).filter(|id| !self.is_special(*id))
    }

    /// Unknown tokens map to UNK.
    pub fn encode(&self, text: &str) -> TokenSeq {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(self.specials.unk)).collect()
    }

    /// Space-joins tokens. Specials other than UNK are skipped.
    pub fn decode(&self, seq: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in seq {
            let tok = self.token(id).ok_or(Error::TokenOutOfRange { id, size: self.size() })?;
            if self.is_special(id) && id != self.specials.unk {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(tok);
        }
        Ok(out)
    }

    pub fn check_ids(&self, seq: &[TokenId]) -> Result<()> {
        match seq.iter().find(|&&id| id as usize >= self.size()) {
            Some(&id) => Err(Error::TokenOutOfRange { id, size: self.size() }),
            None => Ok(()),
        }
    }

    /// SHA-256 over the newline-joined token list.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.tokens.join("\n").as_bytes());
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_tokens(body.lines().map(str::to_owned).collect())
    }
}

/// Builds a vocabulary over every whitespace token in the given corpus files.
///
/// `special_names` lists the pad, mask, bos, eos and unk names in that order.
/// Content tokens follow the specials, sorted by descending frequency and
/// then lexicographically.
pub fn build_vocab<P: AsRef<Path>>(corpus_paths: &[P], special_names: &[&str]) -> Result<Vocabulary> {
    if special_names.len() != DEFAULT_SPECIALS.len() {
        return Err(Error::Config(format!(
            "expected {} special names (pad, mask, bos, eos, unk), got {}",
            DEFAULT_SPECIALS.len(),
            special_names.len()
        )));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for p in corpus_paths {
        let path = p.as_ref();
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for w in body.split_whitespace() {
            *counts.entry(w.to_owned()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::NoTokens);
    }
    if let Some(s) = special_names.iter().find(|s| counts.contains_key(**s)) {
        return Err(Error::Config(format!("corpus contains special token {s:?}")));
    }
    let mut content: Vec<(String, u64)> = counts.into_iter().collect();
    content.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let tokens = special_names
        .iter()
        .map(|s| s.to_string())
        .chain(content.into_iter().map(|(t, _)| t))
        .collect();
    Vocabulary::from_tokens(tokens)
}

/// Reads a corpus file, one document per line. Blank lines are dropped.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(body.lines().filter(|l| !l.trim().is_empty()).map(str::to_owned).collect())
}

pub fn write_corpus(path: impl AsRef<Path>, docs: &[String]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in docs {
        writeln!(w, "{d}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn encode_corpus(docs: &[String], vocab: &Vocabulary) -> Vec<TokenSeq> {
    docs.iter().map(|d| vocab.encode(d)).collect()
}

pub fn load_encoded(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<TokenSeq>> {
    Ok(encode_corpus(&read_corpus(path)?, vocab))
}
