//! Block-restricted, replacement-only editing with a masked-LM editor.
//!
//! The editor reads the unmasked `x‖y` once and resamples every position of
//! the block independently from its own logits.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sample_token, Logits, MlmModel};
use crate::scoring::{ScoreBreakdown, ScoreStack};
use crate::text::{TokenId, TokenSeq};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    pub block_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub temperature: f64,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            block_size: 16,
            iterations: 2,
            seed: 0,
            temperature: 1.0,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || self.iterations == 0 {
            return Err(Error::Config("block_size and iterations must be at least 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Config(format!("temperature {} must be finite and non-negative", self.temperature)));
        }
        Ok(())
    }
}

/// Editors with mixing weights (mixed logits) or in application order
/// (sequential editing).
#[derive(Clone, Debug)]
pub struct EditorEnsemble {
    pub members: Vec<(MlmModel, f64)>,
}

impl EditorEnsemble {
    pub fn new(members: Vec<(MlmModel, f64)>) -> Result<Self> {
        Self::check(&members)?;
        Ok(EditorEnsemble { members })
    }

    fn check(members: &[(MlmModel, f64)]) -> Result<()> {
        let Some((first, _)) = members.first() else {
            return Err(Error::Empty("editor ensemble"));
        };
        for (m, w) in members {
            if !w.is_finite() {
                return Err(Error::Config(format!("editor weight {w} is not finite")));
            }
            if m.config() != first.config() || m.rules != first.rules {
                return Err(Error::Architecture("editors in an ensemble must share config and token rules".into()));
            }
        }
        Ok(())
    }

    pub fn single(editor: MlmModel) -> Self {
        EditorEnsemble {
            members: vec![(editor, 1.0)],
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// `x‖y` cut from the left to `max_len`, and the rows of `block` in it.
pub(crate) fn context(x: &[TokenId], y: &[TokenId], block: &Range<usize>, max_len: usize) -> Result<(Vec<TokenId>, Range<usize>)> {
    if block.start >= block.end || block.end > y.len() {
        return Err(Error::BlockOutOfRange {
            start: block.start,
            end: block.end,
            len: y.len(),
        });
    }
    let full = TokenSeq::from(x).concat(y).into_inner();
    let cut = full.len().saturating_sub(max_len);
    let start = x.len() + block.start;
    if start < cut {
        return Err(Error::TooLong {
            len: full.len() - start,
            max: max_len,
        });
    }
    Ok((full[cut..].to_vec(), start - cut..x.len() + block.end - cut))
}

fn sample_block(logits: &Logits, editor: &MlmModel, y: &[TokenId], block: &Range<usize>, temperature: f64, rng: &mut ChaCha8Rng) -> TokenSeq {
    let mut out = y.to_vec();
    for (r, t) in block.clone().enumerate() {
        out[t] = sample_token(logits.row(r), temperature, &editor.rules, rng);
    }
    TokenSeq(out)
}

pub(crate) fn edit_block_with(
    editor: &MlmModel,
    x: &[TokenId],
    y: &[TokenId],
    block: Range<usize>,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TokenSeq> {
    let (ctx, rows) = context(x, y, &block, editor.config().max_len)?;
    let logits = editor.net.logits_range(&ctx, rows)?;
    Ok(sample_block(&logits, editor, y, &block, temperature, rng))
}

/// One editing pass over `block` (indices into `y`). Returns the new `y`;
/// positions outside the block are copied unchanged.
pub fn edit_block(editor: &MlmModel, x: &[TokenId], y: &[TokenId], block: Range<usize>, temperature: f64, seed: u64) -> Result<TokenSeq> {
    edit_block_with(editor, x, y, block, temperature, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub(crate) fn ml_edit_block_with(
    ensemble: &EditorEnsemble,
    x: &[TokenId],
    y: &[TokenId],
    block: Range<usize>,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TokenSeq> {
    EditorEnsemble::check(&ensemble.members)?;
    let first = &ensemble.members[0].0;
    let (ctx, rows) = context(x, y, &block, first.config().max_len)?;
    let mut combined: Option<Logits> = None;
    for (m, w) in &ensemble.members {
        let l = m.net.logits_range(&ctx, rows.clone())?;
        match &mut combined {
            None => {
                combined = Some(Logits {
                    data: l.data.iter().map(|v| w * v).collect(),
                    ..l
                })
            }
            Some(c) => c.data.iter_mut().zip(&l.data).for_each(|(a, b)| *a += w * b),
        }
    }
    Ok(sample_block(&combined.expect("non-empty ensemble"), first, y, &block, temperature, rng))
}

/// Mixed-logit editing: samples from `softmax(Σ_k λ_k · logits_k)`.
pub fn ml_edit_block(ensemble: &EditorEnsemble, x: &[TokenId], y: &[TokenId], block: Range<usize>, temperature: f64, seed: u64) -> Result<TokenSeq> {
    ml_edit_block_with(ensemble, x, y, block, temperature, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Result of a multi-pass edit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub output: TokenSeq,
    /// Block contents before the first pass and after every pass.
    pub iterations: Vec<TokenSeq>,
    /// Block scores for each entry of `iterations`, when a score stack was
    /// supplied.
    pub scores: Vec<ScoreBreakdown>,
    /// Editor forward passes performed.
    pub passes: usize,
}

/// How a generation loop edits its blocks.
#[derive(Clone, Copy, Debug)]
pub enum Editing<'a> {
    Single(&'a MlmModel),
    /// Mixed logits of all members at every pass.
    MixedLogits(&'a EditorEnsemble),
    /// Each member runs all its passes in list order.
    Sequential(&'a EditorEnsemble),
    /// Leaves every block untouched.
    Identity,
}

impl Editing<'_> {
    /// Editor forward passes needed for one block with `n` iterations.
    pub fn passes_per_block(&self, n: usize) -> usize {
        match self {
            Editing::Single(_) => n,
            Editing::MixedLogits(e) | Editing::Sequential(e) => n * e.len(),
            Editing::Identity => 0,
        }
    }

    pub fn max_len(&self) -> Option<usize> {
        match self {
            Editing::Single(m) => Some(m.config().max_len),
            Editing::MixedLogits(e) | Editing::Sequential(e) => e.members.first().map(|(m, _)| m.config().max_len),
            Editing::Identity => None,
        }
    }

    /// Runs `iterations` passes over `block`, drawing from one seeded stream.
    #[allow(clippy::too_many_arguments)]
    pub fn apply(
        &self,
        x: &[TokenId],
        y: &[TokenId],
        block: Range<usize>,
        iterations: usize,
        temperature: f64,
        rng: &mut ChaCha8Rng,
        stack: Option<&ScoreStack<'_>>,
    ) -> Result<EditOutcome> {
        if iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if block.start >= block.end || block.end > y.len() {
            return Err(Error::BlockOutOfRange {
                start: block.start,
                end: block.end,
                len: y.len(),
            });
        }
        let mut trace = Tracer::new(x, block.clone(), stack);
        let mut cur = TokenSeq::from(y);
        trace.record(&cur)?;
        let mut passes = 0;
        let editors: Vec<&MlmModel> = match self {
            Editing::Single(m) => vec![*m],
            Editing::Sequential(e) => e.members.iter().map(|(m, _)| m).collect(),
            Editing::MixedLogits(_) | Editing::Identity => Vec::new(),
        };
        match self {
            Editing::MixedLogits(e) => {
                for _ in 0..iterations {
                    cur = ml_edit_block_with(e, x, &cur, block.clone(), temperature, rng)?;
                    passes += e.len();
                    trace.record(&cur)?;
                }
            }
            Editing::Identity => {
                for _ in 0..iterations {
                    trace.record(&cur)?;
                }
            }
            _ => {
                for m in editors {
                    for _ in 0..iterations {
                        cur = edit_block_with(m, x, &cur, block.clone(), temperature, rng)?;
                        passes += 1;
                        trace.record(&cur)?;
                    }
                }
            }
        }
        Ok(EditOutcome {
            output: cur,
            iterations: trace.blocks,
            scores: trace.scores,
            passes,
        })
    }
}

struct Tracer<'s, 'a> {
    x: &'s [TokenId],
    block: Range<usize>,
    stack: Option<&'s ScoreStack<'a>>,
    blocks: Vec<TokenSeq>,
    scores: Vec<ScoreBreakdown>,
}

impl<'s, 'a> Tracer<'s, 'a> {
    fn new(x: &'s [TokenId], block: Range<usize>, stack: Option<&'s ScoreStack<'a>>) -> Self {
        Tracer {
            x,
            block,
            stack,
            blocks: Vec::new(),
            scores: Vec::new(),
        }
    }

    fn record(&mut self, y: &[TokenId]) -> Result<()> {
        self.blocks.push(TokenSeq::from(&y[self.block.clone()]));
        if let Some(stack) = self.stack {
            let seq = TokenSeq::from(self.x).concat(y);
            let cut = stack.max_len().map_or(0, |m| seq.len().saturating_sub(m));
            let off = self.x.len() - cut.min(self.x.len());
            self.scores
                .push(stack.breakdown_range(&seq[cut..], off + self.block.start..off + self.block.end)?);
        }
        Ok(())
    }
}

/// `config.iterations` successive edits of `block`, each reading the previous
/// output. The seed stream of `config.seed` is shared across passes.
pub fn iterative_edit(
    editor: &MlmModel,
    x: &[TokenId],
    y: &[TokenId],
    block: Range<usize>,
    config: &EditConfig,
    stack: Option<&ScoreStack<'_>>,
) -> Result<EditOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Editing::Single(editor).apply(x, y, block, config.iterations, config.temperature, &mut rng, stack)
}

/// Sequential editing: `iterative_edit` with every member in list order.
pub fn se_edit(
    ensemble: &EditorEnsemble,
    x: &[TokenId],
    y: &[TokenId],
    block: Range<usize>,
    config: &EditConfig,
    stack: Option<&ScoreStack<'_>>,
) -> Result<EditOutcome> {
    config.validate()?;
    EditorEnsemble::check(&ensemble.members)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Editing::Sequential(ensemble).apply(x, y, block, config.iterations, config.temperature, &mut rng, stack)
}

/// The last `b` positions of a `y` of length `len` (fewer if `len < b`).
pub fn tail_block(len: usize, b: usize) -> Range<usize> {
    len.saturating_sub(b)..len
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Params, Role, TokenRules};
    use crate::scoring::ScoreWeights;
    use crate::tensor::masked_softmax;
    use rand::Rng;

    fn cfg(v: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: v,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 16,
            max_len: 32,
            dropout: 0.0,
            distance_bias: false,
        }
    }

    fn rules() -> TokenRules {
        TokenRules {
            mask: Some(1),
            suppressed: vec![0, 1, 2, 3],
        }
    }

    fn editor(seed: u64) -> MlmModel {
        MlmModel::new(cfg(12), rules(), Role::Editor, seed).unwrap()
    }

    fn forced(token: usize) -> MlmModel {
        let c = cfg(12);
        let mut p = Params::init(&c, &mut ChaCha8Rng::seed_from_u64(0));
        p.head_w.data.fill(0.0);
        p.head_b.data[token] = 60.0;
        MlmModel::from_params(c, p, rules(), Role::Editor).unwrap()
    }

    #[test]
    fn forced_editor_fills_block() {
        let m = forced(9);
        let x = [5, 6, 7];
        let y = [5, 6, 7, 8, 5, 6];
        let out = edit_block(&m, &x, &y, tail_block(6, 4), 1.0, 3).unwrap();
        assert_eq!(out.0, vec![5, 6, 9, 9, 9, 9]);
    }

    #[test]
    fn deterministic_under_seed() {
        let m = editor(1);
        let x = [5, 6, 7, 8];
        let y = [9, 10, 11, 5, 6, 7];
        let a = edit_block(&m, &x, &y, 2..6, 1.0, 77).unwrap();
        assert_eq!(a, edit_block(&m, &x, &y, 2..6, 1.0, 77).unwrap());
        assert!(edit_block(&m, &x, &y, 2..7, 1.0, 77).is_err());
        assert!(edit_block(&m, &x, &y, 3..3, 1.0, 77).is_err());
    }

    #[test]
    fn locality_and_length_fuzz() {
        let m = editor(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for seed in 0..200 {
            let x: Vec<TokenId> = (0..8).map(|_| rng.random_range(4..12)).collect();
            let y: Vec<TokenId> = (0..16).map(|_| rng.random_range(4..12)).collect();
            let out = edit_block(&m, &x, &y, tail_block(16, 4), 1.0, seed).unwrap();
            assert_eq!(out.len(), 16);
            assert_eq!(&out[..12], &y[..12]);
        }
    }

    #[test]
    fn overlong_context_is_cut_from_the_left() {
        let m = editor(3);
        let x: Vec<TokenId> = (0..30).map(|i| 4 + (i % 8)).collect();
        let y: Vec<TokenId> = vec![5; 8];
        let out = edit_block(&m, &x, &y, 4..8, 1.0, 1).unwrap();
        let cut = TokenSeq::from(&x[6..]).concat(&y);
        let direct = edit_block(&m, &cut[..24], &cut[24..], 4..8, 1.0, 1).unwrap();
        assert_eq!(out, direct);
        assert!(edit_block(&m, &x, &y, 0..8, 1.0, 1).is_ok());
        let long_y = vec![5; 40];
        assert!(edit_block(&m, &x, &long_y, 0..40, 1.0, 1).is_err());
    }

    #[test]
    fn iterative_edit_counts_passes_and_chains() {
        let m = editor(4);
        let x = [5, 6, 7, 8];
        let y: Vec<TokenId> = vec![9; 16];
        let one = iterative_edit(
            &m,
            &x,
            &y,
            0..16,
            &EditConfig {
                iterations: 1,
                seed: 5,
                ..EditConfig::default()
            },
            None,
        )
        .unwrap();
        assert_eq!(one.output, edit_block(&m, &x, &y, 0..16, 1.0, 5).unwrap());
        let two = iterative_edit(
            &m,
            &x,
            &y,
            0..16,
            &EditConfig {
                seed: 5,
                ..EditConfig::default()
            },
            None,
        )
        .unwrap();
        assert_eq!(two.passes, 2);
        assert_eq!(two.iterations.len(), 3);
        assert_eq!(two.iterations[1], one.output);
        assert_eq!(two.iterations[2], two.output);
    }

    #[test]
    fn trace_scores_cover_the_block() {
        let m = editor(5);
        let scorer = editor(6);
        let stack = ScoreStack::standard(&scorer, None, &ScoreWeights::default()).unwrap();
        let x = [5, 6, 7];
        let y = [8, 9, 10, 11];
        let out = iterative_edit(&m, &x, &y, 2..4, &EditConfig::default(), Some(&stack)).unwrap();
        assert_eq!(out.scores.len(), 3);
        assert_eq!(out.scores[0].start, 5);
        assert_eq!(out.scores[0].total_per_pos.len(), 2);
    }

    #[test]
    fn mixed_logits_reductions() {
        let m = editor(7);
        let x = [5, 6, 7, 8];
        let y = [9, 10, 11, 5, 6, 7];
        let single = EditorEnsemble::single(m.clone());
        for seed in 0..20 {
            assert_eq!(
                ml_edit_block(&single, &x, &y, 2..6, 1.0, seed).unwrap(),
                edit_block(&m, &x, &y, 2..6, 1.0, seed).unwrap()
            );
        }
        assert!(EditorEnsemble::new(vec![(m.clone(), 10.0), (editor(8), 1.0)]).is_ok());

        // Logits L and -L cancel exactly.
        let mut neg = m.clone();
        neg.net.params.head_w.data.iter_mut().for_each(|w| *w = -*w);
        neg.net.params.head_b.data.iter_mut().for_each(|w| *w = -*w);
        let ens = EditorEnsemble::new(vec![(m.clone(), 1.0), (neg.clone(), 1.0)]).unwrap();
        let ctx = TokenSeq::from(&x[..]).concat(&y);
        let a = m.net.logits_range(&ctx, 6..10).unwrap();
        let b = neg.net.logits_range(&ctx, 6..10).unwrap();
        for (p, q) in a.data.iter().zip(&b.data) {
            assert_eq!(p + q, 0.0);
        }
        let probs = masked_softmax(&[0.0; 12], |i| m.rules.allows(i), 1.0);
        assert!(probs[4..].iter().all(|&p| (p - 1.0 / 8.0).abs() < 1e-15));
        let mut counts = [0usize; 12];
        for seed in 0..400 {
            let out = ml_edit_block(&ens, &x, &y, 5..6, 1.0, seed).unwrap();
            counts[out[5] as usize] += 1;
        }
        assert_eq!(counts[..4], [0; 4]);
        assert!(counts[4..].iter().all(|&c| c > 20), "{counts:?}");

        let other = MlmModel::new(ModelConfig { d_model: 4, ..cfg(12) }, rules(), Role::Editor, 0).unwrap();
        assert!(matches!(EditorEnsemble::new(vec![(m, 1.0), (other, 1.0)]), Err(Error::Architecture(_))));
    }

    #[test]
    fn sequential_reductions_and_order() {
        let a = editor(9);
        let b = forced(10);
        let x = [5, 6, 7, 8];
        let y = [9, 4, 11, 5, 6, 7];
        let cfg = EditConfig {
            seed: 3,
            ..EditConfig::default()
        };
        let se = se_edit(&EditorEnsemble::single(a.clone()), &x, &y, 2..6, &cfg, None).unwrap();
        assert_eq!(se, iterative_edit(&a, &x, &y, 2..6, &cfg, None).unwrap());

        let ab = se_edit(
            &EditorEnsemble::new(vec![(a.clone(), 1.0), (b.clone(), 1.0)]).unwrap(),
            &x,
            &y,
            2..6,
            &cfg,
            None,
        )
        .unwrap();
        assert_eq!(ab.passes, 4);
        assert_eq!(ab.output.0, vec![9, 4, 10, 10, 10, 10]);
        let ba = se_edit(&EditorEnsemble::new(vec![(b, 1.0), (a, 1.0)]).unwrap(), &x, &y, 2..6, &cfg, None).unwrap();
        assert_ne!(ab.output, ba.output);
    }

    #[test]
    fn identity_editing_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = Editing::Identity.apply(&[5], &[6, 7], 0..2, 2, 1.0, &mut rng, None).unwrap();
        assert_eq!(out.output.0, vec![6, 7]);
        assert_eq!(out.passes, 0);
        assert_eq!(Editing::Identity.passes_per_block(2), 0);
    }
}
