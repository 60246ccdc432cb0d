//! Offline training-set construction: target-corpus prefixes paired with
//! backbone continuations.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneRequest};
use crate::error::{Error, Result};
use crate::generation::derive_seed;
use crate::text::TokenSeq;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSample {
    /// Prefix window from the target corpus.
    pub x: TokenSeq,
    /// Backbone continuation of `x`.
    pub y_tilde: TokenSeq,
    /// Index of the source document in the target corpus.
    pub doc: usize,
    /// Token offset of `x` in that document.
    pub offset: usize,
}

/// `count` samples, each a random `prefix_len` window of an eligible target
/// document followed by `b` backbone tokens. Documents shorter than
/// `prefix_len` are skipped.
pub fn build_training_set(
    target: &[TokenSeq],
    backbone: &dyn Backbone,
    count: usize,
    prefix_len: usize,
    b: usize,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    if prefix_len == 0 || b == 0 {
        return Err(Error::Config("prefix_len and block size must be at least 1".into()));
    }
    let eligible: Vec<usize> = (0..target.len()).filter(|&i| target[i].len() >= prefix_len).collect();
    if eligible.is_empty() {
        return Err(Error::Config(format!("no target document has at least {prefix_len} tokens")));
    }
    let skipped = target.len() - eligible.len();
    if skipped > 0 {
        log::warn!("skipping {skipped} target documents shorter than {prefix_len} tokens");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<(usize, usize)> = (0..count)
        .map(|_| {
            let doc = eligible[rng.random_range(0..eligible.len())];
            (doc, rng.random_range(0..=target[doc].len() - prefix_len))
        })
        .collect();
    picks
        .into_par_iter()
        .enumerate()
        .map(|(i, (doc, offset))| {
            let x = TokenSeq::from(&target[doc][offset..offset + prefix_len]);
            let req = BackboneRequest {
                prefix: x.0.clone(),
                n_tokens: b,
                seed: derive_seed(seed, i as u64),
                ..Default::default()
            };
            let y_tilde = backbone.generate(&req)?;
            if y_tilde.len() != b {
                return Err(Error::LengthMismatch(format!("backbone returned {} tokens, expected {b}", y_tilde.len())));
            }
            Ok(TrainSample { x, y_tilde, doc, offset })
        })
        .collect()
}

pub fn save_training_set(path: impl AsRef<Path>, samples: &[TrainSample]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for s in samples {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn load_training_set(path: impl AsRef<Path>) -> Result<Vec<TrainSample>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
