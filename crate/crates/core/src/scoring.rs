//! Target scores: masked-LM score, repetition penalty, sequence-level
//! discriminator logit, their weighted combination, and the clipped score
//! disparity between an edited and an unedited sequence.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MlmModel;
use crate::text::{TokenId, TokenSeq};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreWeights {
    pub alpha: f64,
    pub beta: f64,
    pub clip: f64,
    /// Mixed-score composition: `(score id, λ)` pairs replacing the
    /// standard `mlm + α·rep + β·disc` sum.
    #[serde(default)]
    pub multi: Option<Vec<(String, f64)>>,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights {
            alpha: 1.0,
            beta: 1.0,
            clip: 10.0,
            multi: None,
        }
    }
}

impl ScoreWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "alpha {} and beta {} must be finite and non-negative",
                self.alpha, self.beta
            )));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::Config(format!("clip {} must be finite and positive", self.clip)));
        }
        if let Some(multi) = &self.multi {
            if multi.is_empty() {
                return Err(Error::Config("multi score list is empty".into()));
            }
            if let Some((id, w)) = multi.iter().find(|(_, w)| !w.is_finite()) {
                return Err(Error::Config(format!("weight {w} for score `{id}` is not finite")));
            }
        }
        Ok(())
    }
}

/// Logistic model over normalized token frequencies: the score of a sequence
/// is `bias + Σ_t w[x_t] / T`, summed over enabled features only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Discriminator {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Features (token ids) the model may use.
    pub feature_mask: Vec<bool>,
}

impl Discriminator {
    pub fn zeros(vocab_size: usize) -> Self {
        Discriminator {
            weights: vec![0.0; vocab_size],
            bias: 0.0,
            feature_mask: vec![true; vocab_size],
        }
    }

    /// All features enabled except a seeded random `drop_rate` fraction.
    pub fn with_feature_seed(vocab_size: usize, seed: u64, drop_rate: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feature_mask = (0..vocab_size).map(|_| rng.random::<f64>() >= drop_rate).collect();
        Discriminator {
            feature_mask,
            ..Discriminator::zeros(vocab_size)
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.len()
    }

    /// Normalized bag-of-tokens features (zero on disabled features).
    pub fn features(&self, seq: &[TokenId]) -> Vec<f64> {
        let mut f = vec![0.0; self.weights.len()];
        if seq.is_empty() {
            return f;
        }
        let inc = 1.0 / seq.len() as f64;
        for &id in seq {
            if let Some(slot) = f.get_mut(id as usize) {
                if self.feature_mask[id as usize] {
                    *slot += inc;
                }
            }
        }
        f
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let d: Discriminator = serde_json::from_str(&text)?;
        if d.feature_mask.len() != d.weights.len() {
            return Err(Error::Config(format!("{}: feature mask and weights differ in length", path.display())));
        }
        Ok(d)
    }
}

/// Raw (pre-sigmoid) discriminator logit.
pub fn disc_score(disc: &Discriminator, seq: &[TokenId]) -> f64 {
    let f = disc.features(seq);
    disc.bias + f.iter().zip(&disc.weights).map(|(x, w)| x * w).sum::<f64>()
}

/// `rep_t = Σ_{i≠t, x_i = x_t} −1/|i−t|` for every position.
pub fn repetition_per_pos(seq: &[TokenId]) -> Vec<f64> {
    repetition_at(seq, 0..seq.len())
}

fn repetition_at(seq: &[TokenId], positions: impl IntoIterator<Item = usize>) -> Vec<f64> {
    let mut by_token: HashMap<TokenId, Vec<usize>> = HashMap::new();
    for (i, &x) in seq.iter().enumerate() {
        by_token.entry(x).or_default().push(i);
    }
    positions
        .into_iter()
        .map(|t| {
            let mut acc = 0.0;
            for &i in &by_token[&seq[t]] {
                if i != t {
                    acc -= 1.0 / i.abs_diff(t) as f64;
                }
            }
            acc
        })
        .collect()
}

/// One named, weighted term of a score stack.
#[derive(Clone, Copy, Debug)]
pub enum Component<'a> {
    /// Masked-LM score: raw logit of the original token with its position
    /// masked.
    Mlm(&'a MlmModel),
    Repetition,
    /// Sequence-level logit broadcast to every position.
    Disc(&'a Discriminator),
}

impl Component<'_> {
    fn kind(&self) -> &'static str {
        match self {
            Component::Mlm(_) => "mlm",
            Component::Repetition => "rep",
            Component::Disc(_) => "disc",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentScores {
    pub id: String,
    pub kind: String,
    pub weight: f64,
    pub per_pos: Vec<f64>,
    pub total: f64,
}

/// Per-position decomposition of the total score over positions
/// `start..start + total_per_pos.len()` of one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub start: usize,
    pub mlm_per_pos: Vec<f64>,
    pub rep_per_pos: Vec<f64>,
    pub disc: f64,
    pub total_per_pos: Vec<f64>,
    pub mlm_total: f64,
    pub rep_total: f64,
    pub total: f64,
    /// Every weighted term, in stack order.
    pub components: Vec<ComponentScores>,
}

impl ScoreBreakdown {
    pub fn mean_total(&self) -> f64 {
        if self.total_per_pos.is_empty() {
            0.0
        } else {
            self.total / self.total_per_pos.len() as f64
        }
    }
}

/// A weighted list of score components, counting masked scorer passes.
#[derive(Debug)]
pub struct ScoreStack<'a> {
    terms: Vec<(String, Component<'a>, f64)>,
    masked_passes: AtomicU64,
}

impl<'a> ScoreStack<'a> {
    pub fn new(terms: Vec<(String, Component<'a>, f64)>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Config("score stack has no terms".into()));
        }
        Ok(ScoreStack {
            terms,
            masked_passes: AtomicU64::new(0),
        })
    }

    /// `mlm + α·rep (+ β·disc)`, or the mixed composition of `weights.multi`
    /// resolved against `registry`.
    pub fn from_weights(
        scorer: &'a MlmModel,
        disc: Option<&'a Discriminator>,
        weights: &ScoreWeights,
        registry: &HashMap<String, Component<'a>>,
    ) -> Result<Self> {
        weights.validate()?;
        match &weights.multi {
            None => ScoreStack::standard(scorer, disc, weights),
            Some(multi) => {
                let terms = multi
                    .iter()
                    .map(|(id, w)| {
                        let c = match registry.get(id) {
                            Some(c) => *c,
                            None if id == "mlm" => Component::Mlm(scorer),
                            None if id == "rep" => Component::Repetition,
                            None if id == "disc" && disc.is_some() => Component::Disc(disc.unwrap()),
                            None => return Err(Error::UnknownScore(id.clone())),
                        };
                        Ok((id.clone(), c, *w))
                    })
                    .collect::<Result<_>>()?;
                ScoreStack::new(terms)
            }
        }
    }

    pub fn standard(scorer: &'a MlmModel, disc: Option<&'a Discriminator>, weights: &ScoreWeights) -> Result<Self> {
        let mut terms = vec![
            ("mlm".to_string(), Component::Mlm(scorer), 1.0),
            ("rep".to_string(), Component::Repetition, weights.alpha),
        ];
        if let Some(d) = disc {
            terms.push(("disc".to_string(), Component::Disc(d), weights.beta));
        }
        ScoreStack::new(terms)
    }

    pub fn terms(&self) -> &[(String, Component<'a>, f64)] {
        &self.terms
    }

    /// Longest sequence every masked-LM component accepts.
    pub fn max_len(&self) -> Option<usize> {
        self.terms
            .iter()
            .filter_map(|(_, c, _)| match c {
                Component::Mlm(m) => Some(m.config().max_len),
                _ => None,
            })
            .min()
    }

    pub fn masked_passes(&self) -> u64 {
        self.masked_passes.load(Ordering::Relaxed)
    }

    fn component_at(&self, c: &Component<'_>, seq: &[TokenId], positions: &[usize]) -> Result<Vec<f64>> {
        match c {
            Component::Mlm(m) => {
                let v = mlm_at(m, seq, positions)?;
                self.masked_passes.fetch_add(positions.len() as u64, Ordering::Relaxed);
                Ok(v)
            }
            Component::Repetition => Ok(repetition_at(seq, positions.iter().copied())),
            Component::Disc(d) => Ok(vec![disc_score(d, seq); positions.len()]),
        }
    }

    fn check(&self, seq: &[TokenId]) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::Empty("sequence to score"));
        }
        for (_, c, _) in &self.terms {
            if let Component::Mlm(m) = c {
                m.net.check_input(seq)?;
                let mask = m.mask_id()?;
                if let Some(p) = seq.iter().position(|&x| x == mask) {
                    return Err(Error::MaskInInput(p));
                }
            }
        }
        Ok(())
    }

    /// Total score at the given positions only.
    pub fn totals_at(&self, seq: &[TokenId], positions: &[usize]) -> Result<Vec<f64>> {
        self.check(seq)?;
        let mut total = vec![0.0; positions.len()];
        for (_, c, w) in &self.terms {
            let v = self.component_at(c, seq, positions)?;
            for (t, x) in total.iter_mut().zip(v) {
                *t += w * x;
            }
        }
        Ok(total)
    }

    /// Breakdown restricted to `range`; the whole sequence is still the
    /// context of every score.
    pub fn breakdown_range(&self, seq: &[TokenId], range: Range<usize>) -> Result<ScoreBreakdown> {
        self.check(seq)?;
        if range.start >= range.end || range.end > seq.len() {
            return Err(Error::BlockOutOfRange {
                start: range.start,
                end: range.end,
                len: seq.len(),
            });
        }
        let positions: Vec<usize> = range.clone().collect();
        let n = positions.len();
        let mut out = ScoreBreakdown {
            start: range.start,
            mlm_per_pos: vec![0.0; n],
            rep_per_pos: vec![0.0; n],
            disc: 0.0,
            total_per_pos: vec![0.0; n],
            mlm_total: 0.0,
            rep_total: 0.0,
            total: 0.0,
            components: Vec::with_capacity(self.terms.len()),
        };
        let (mut seen_mlm, mut seen_rep, mut seen_disc) = (false, false, false);
        for (id, c, w) in &self.terms {
            let v = self.component_at(c, seq, &positions)?;
            for (t, x) in out.total_per_pos.iter_mut().zip(&v) {
                *t += w * x;
            }
            match c {
                Component::Mlm(_) if !seen_mlm => {
                    seen_mlm = true;
                    out.mlm_per_pos = v.clone();
                }
                Component::Repetition if !seen_rep => {
                    seen_rep = true;
                    out.rep_per_pos = v.clone();
                }
                Component::Disc(_) if !seen_disc => {
                    seen_disc = true;
                    out.disc = v[0];
                }
                _ => {}
            }
            out.components.push(ComponentScores {
                id: id.clone(),
                kind: c.kind().into(),
                weight: *w,
                total: v.iter().sum(),
                per_pos: v,
            });
        }
        out.mlm_total = out.mlm_per_pos.iter().sum();
        out.rep_total = out.rep_per_pos.iter().sum();
        out.total = out.total_per_pos.iter().sum();
        Ok(out)
    }

    pub fn breakdown(&self, seq: &[TokenId]) -> Result<ScoreBreakdown> {
        self.breakdown_range(seq, 0..seq.len())
    }
}

fn mlm_at(scorer: &MlmModel, seq: &[TokenId], positions: &[usize]) -> Result<Vec<f64>> {
    let mask = scorer.mask_id()?;
    positions
        .par_iter()
        .map(|&t| {
            let mut masked = seq.to_vec();
            masked[t] = mask;
            Ok(scorer.net.logits_row(&masked, t)?[seq[t] as usize])
        })
        .collect()
}

/// Masked-LM score of every position (mlm fields of the breakdown filled,
/// everything else zero).
pub fn mlm_score(scorer: &MlmModel, seq: &[TokenId]) -> Result<ScoreBreakdown> {
    ScoreStack::new(vec![("mlm".into(), Component::Mlm(scorer), 1.0)])?.breakdown(seq)
}

pub fn repetition_score(seq: &[TokenId]) -> ScoreBreakdown {
    let rep = repetition_per_pos(seq);
    let total: f64 = rep.iter().sum();
    ScoreBreakdown {
        start: 0,
        mlm_per_pos: vec![0.0; seq.len()],
        total_per_pos: rep.clone(),
        disc: 0.0,
        mlm_total: 0.0,
        rep_total: total,
        total,
        components: vec![ComponentScores {
            id: "rep".into(),
            kind: "rep".into(),
            weight: 1.0,
            per_pos: rep.clone(),
            total,
        }],
        rep_per_pos: rep,
    }
}

/// Full breakdown under the standard composition (or the mixed one when
/// `weights.multi` is set).
pub fn total_score(seq: &[TokenId], scorer: &MlmModel, disc: Option<&Discriminator>, weights: &ScoreWeights) -> Result<ScoreBreakdown> {
    ScoreStack::from_weights(scorer, disc, weights, &HashMap::new())?.breakdown(seq)
}

/// Clipped per-position disparity over `block` (indices into `y`):
/// zero where `y_hat` keeps the token of `y_tilde`, otherwise the difference
/// of total scores at the shifted position of `x‖y_hat` and `x‖y_tilde`.
pub fn score_disparity(
    x: &[TokenId],
    y_tilde: &[TokenId],
    y_hat: &[TokenId],
    block: Range<usize>,
    stack: &ScoreStack<'_>,
    clip: f64,
) -> Result<Vec<f64>> {
    if y_tilde.len() != y_hat.len() {
        return Err(Error::LengthMismatch(format!(
            "y_tilde has {} tokens, y_hat {}",
            y_tilde.len(),
            y_hat.len()
        )));
    }
    if block.start > block.end || block.end > y_hat.len() {
        return Err(Error::BlockOutOfRange {
            start: block.start,
            end: block.end,
            len: y_hat.len(),
        });
    }
    if !(clip > 0.0 && clip.is_finite()) {
        return Err(Error::Config(format!("clip {clip} must be finite and positive")));
    }
    let changed: Vec<usize> = block.clone().filter(|&t| y_hat[t] != y_tilde[t]).collect();
    let mut d = vec![0.0; block.len()];
    if changed.is_empty() {
        return Ok(d);
    }
    let shifted: Vec<usize> = changed.iter().map(|t| x.len() + t).collect();
    let edited = TokenSeq::from(x).concat(y_hat);
    let input = TokenSeq::from(x).concat(y_tilde);
    let after = stack.totals_at(&edited, &shifted)?;
    let before = stack.totals_at(&input, &shifted)?;
    for ((t, a), b) in changed.iter().zip(after).zip(before) {
        d[t - block.start] = (a - b).clamp(-clip, clip);
    }
    Ok(d)
}
