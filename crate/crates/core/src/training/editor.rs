//! Editor training: sample edits from the editor itself, weight each edited
//! token by its clipped score disparity times its (detached) probability,
//! and ascend the weighted log-likelihood.

use std::io::Write;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TrainSample;
use crate::editor::context;
use crate::error::{Error, Result};
use crate::model::{sample_token, Adam, AdamConfig, MlmModel, Params, Role};
use crate::scoring::{score_disparity, ScoreStack, ScoreWeights};
use crate::tensor::masked_softmax;
use crate::text::{TokenId, TokenSeq};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditorTrainConfig {
    /// Editing iterations `N` per sample.
    pub iterations: usize,
    /// Sampled tokens per position in the expectation. Only 1 is supported.
    pub top_k: usize,
    pub weights: ScoreWeights,
    pub adam: AdamConfig,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for EditorTrainConfig {
    fn default() -> Self {
        EditorTrainConfig {
            iterations: 2,
            top_k: 1,
            weights: ScoreWeights::default(),
            adam: AdamConfig {
                lr: 1e-4,
                ..AdamConfig::default()
            },
            steps: 1000,
            batch: 1,
            seed: 0,
        }
    }
}

impl EditorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch == 0 {
            return Err(Error::Config("iterations and batch must be at least 1".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if self.top_k > 1 {
            return Err(Error::Unsupported(format!(
                "top_k = {} (only single-sample expectations are implemented)",
                self.top_k
            )));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.adam.lr)));
        }
        self.weights.validate()
    }
}

/// One editing iteration of one sample, frozen for differentiation.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    /// Editor input `x‖ŷ^(i)`, cut from the left to the editor's max_len.
    pub input: Vec<TokenId>,
    /// Rows of the block in `input`.
    pub rows: Range<usize>,
    /// Sampled block `ŷ^(i+1)`.
    pub targets: Vec<TokenId>,
    /// `w_t = d_t · p(ŷ^(i+1)_t)`, treated as constants.
    pub weights: Vec<f64>,
}

/// Result of running the editor `N` times on one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub records: Vec<IterationRecord>,
    /// Block contents `ŷ^(0) = ỹ, ŷ^(1), …, ŷ^(N)`.
    pub chain: Vec<TokenSeq>,
    /// Disparity per iteration and block position.
    pub disparity: Vec<Vec<f64>>,
}

/// Samples `ŷ^(1..=N)` from the editor (ancestral, temperature 1) and
/// records the weights of every iteration. `d` compares each iteration's
/// output with its own input.
pub fn rollout(
    editor: &MlmModel,
    sample: &TrainSample,
    stack: &ScoreStack<'_>,
    iterations: usize,
    clip: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout> {
    let x = &sample.x;
    let b = sample.y_tilde.len();
    if b == 0 {
        return Err(Error::Empty("y_tilde"));
    }
    let mut cur = sample.y_tilde.clone();
    let mut out = Rollout {
        records: Vec::with_capacity(iterations),
        chain: vec![cur.clone()],
        disparity: Vec::with_capacity(iterations),
    };
    for _ in 0..iterations {
        let (input, rows) = context(x, &cur, &(0..b), editor.config().max_len)?;
        let logits = editor.net.logits_range(&input, rows.clone())?;
        let mut next = Vec::with_capacity(b);
        let mut probs = Vec::with_capacity(b);
        for r in 0..b {
            let row = logits.row(r);
            let tok = sample_token(row, 1.0, &editor.rules, rng);
            probs.push(editor.token_probs(row, 1.0)[tok as usize]);
            next.push(tok);
        }
        let d = score_disparity(x, &cur, &next, 0..b, stack, clip)?;
        let weights = d.iter().zip(&probs).map(|(d, p)| d * p).collect();
        out.records.push(IterationRecord {
            input,
            rows,
            targets: next.clone(),
            weights,
        });
        out.disparity.push(d);
        cur = TokenSeq(next);
        out.chain.push(cur.clone());
    }
    Ok(out)
}

fn record_loss(editor: &MlmModel, rec: &IterationRecord, scale: f64, want_grad: bool) -> Result<(f64, Option<Params>)> {
    if rec.weights.iter().all(|&w| w == 0.0) {
        return Ok((0.0, None));
    }
    let cache = editor.net.forward_train(&rec.input, None)?;
    let v = editor.config().vocab_size;
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; rec.input.len() * v];
    for (i, (&y, &w)) in rec.targets.iter().zip(&rec.weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        let t = rec.rows.start + i;
        let probs = masked_softmax(cache.logits.row(t), |j| editor.rules.allows(j), 1.0);
        loss -= scale * w * probs[y as usize].ln();
        let row = &mut dlogits[t * v..(t + 1) * v];
        for (d, p) in row.iter_mut().zip(&probs) {
            *d = scale * w * p;
        }
        row[y as usize] -= scale * w;
    }
    let grads = want_grad.then(|| editor.net.backward(&cache, &dlogits));
    Ok((loss, grads))
}

fn weighted(editor: &MlmModel, records: &[IterationRecord], iterations: usize, samples: usize, want_grad: bool) -> Result<(f64, Option<Params>)> {
    if iterations == 0 || samples == 0 {
        return Err(Error::Config("iterations and samples must be at least 1".into()));
    }
    let scale = 1.0 / (iterations * samples) as f64;
    let parts: Vec<(f64, Option<Params>)> = records
        .par_iter()
        .map(|r| record_loss(editor, r, scale, want_grad))
        .collect::<Result<_>>()?;
    let loss = parts.iter().map(|(l, _)| l).sum();
    let grads = Params::sum_in_order(parts.into_iter().filter_map(|(_, g)| g).collect());
    Ok((loss, grads))
}

/// `−1/(N·B) Σ w_t log p(ŷ^(i+1)_t | x, ŷ^(i))` over all records of a batch
/// of `samples` samples with `iterations` iterations each.
pub fn weighted_nll(editor: &MlmModel, records: &[IterationRecord], iterations: usize, samples: usize) -> Result<f64> {
    Ok(weighted(editor, records, iterations, samples, false)?.0)
}

/// [`weighted_nll`] and its gradient with the weights held fixed. The
/// gradient is `None` when every weight is zero.
pub fn weighted_nll_and_grad(editor: &MlmModel, records: &[IterationRecord], iterations: usize, samples: usize) -> Result<(f64, Option<Params>)> {
    weighted(editor, records, iterations, samples, true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub loss: f64,
    /// Mean disparity over block positions, per iteration.
    pub mean_d: Vec<f64>,
    /// Fraction of block positions changed, over all iterations.
    pub edit_fraction: f64,
    pub max_abs_d: f64,
    /// False when every weight was zero and no update was made.
    pub updated: bool,
}

fn mean_per_iteration(rollouts: &[Rollout], iterations: usize) -> Vec<f64> {
    (0..iterations)
        .map(|i| {
            let (s, n) = rollouts.iter().fold((0.0, 0usize), |(s, n), r| {
                (s + r.disparity[i].iter().sum::<f64>(), n + r.disparity[i].len())
            });
            if n == 0 {
                0.0
            } else {
                s / n as f64
            }
        })
        .collect()
}

/// Rollouts for a batch, then one optimizer step on the weighted loss.
/// Batches whose weights are all zero leave the editor and the optimizer
/// untouched.
pub fn editor_train_step(
    editor: &mut MlmModel,
    opt: &mut Adam,
    batch: &[&TrainSample],
    stack: &ScoreStack<'_>,
    cfg: &EditorTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(StepDiagnostics, Vec<Rollout>)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
    let rollouts: Vec<Rollout> = batch
        .par_iter()
        .zip(seeds)
        .map(|(s, seed)| rollout(editor, s, stack, cfg.iterations, cfg.weights.clip, &mut ChaCha8Rng::seed_from_u64(seed)))
        .collect::<Result<_>>()?;
    let records: Vec<IterationRecord> = rollouts.iter().flat_map(|r| r.records.iter().cloned()).collect();
    let (loss, grads) = weighted_nll_and_grad(editor, &records, cfg.iterations, batch.len())?;
    let max_abs_d = rollouts
        .iter()
        .flat_map(|r| r.disparity.iter().flatten())
        .fold(0.0f64, |m, d| m.max(d.abs()));
    assert!(max_abs_d <= cfg.weights.clip, "disparity {max_abs_d} exceeds clip {}", cfg.weights.clip);
    let (changed, total) = rollouts.iter().fold((0usize, 0usize), |(c, t), r| {
        let c2: usize = r
            .chain
            .windows(2)
            .map(|w| w[0].iter().zip(w[1].iter()).filter(|(a, b)| a != b).count())
            .sum();
        (c + c2, t + cfg.iterations * r.chain[0].len())
    });
    let diag = StepDiagnostics {
        loss,
        mean_d: mean_per_iteration(&rollouts, cfg.iterations),
        edit_fraction: changed as f64 / total as f64,
        max_abs_d,
        updated: grads.is_some(),
    };
    if let Some(g) = grads {
        if !loss.is_finite() || !g.all_finite() {
            return Err(Error::NonFinite {
                step: opt.steps_taken() as usize,
                detail: format!("editor loss {loss}, diagnostics {diag:?}"),
            });
        }
        opt.step(&mut editor.net.params, &g);
    }
    Ok((diag, rollouts))
}

/// One line of the training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub mean_d: Vec<f64>,
    pub edit_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EditorTrainReport {
    pub steps: Vec<StepRecord>,
    /// Steps skipped because no token was edited.
    pub zero_edit_steps: usize,
}

impl EditorTrainReport {
    /// Mean of `mean_d` per iteration over the last `n` steps.
    pub fn tail_mean_d(&self, n: usize) -> Vec<f64> {
        let tail = &self.steps[self.steps.len().saturating_sub(n)..];
        let Some(first) = tail.first() else { return Vec::new() };
        (0..first.mean_d.len())
            .map(|i| tail.iter().map(|s| s.mean_d[i]).sum::<f64>() / tail.len() as f64)
            .collect()
    }
}

/// Trains a copy of `init` for `cfg.steps` steps over shuffled batches.
/// `init` must be the fine-tuned scorer. Each step is appended to `log` as a
/// JSON line when given.
pub fn train_editor(
    init: &MlmModel,
    samples: &[TrainSample],
    stack: &ScoreStack<'_>,
    cfg: &EditorTrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(MlmModel, EditorTrainReport)> {
    cfg.validate()?;
    if init.role != Role::Scorer {
        return Err(Error::StageOrder(format!(
            "editor training must start from the fine-tuned scorer (role `scorer`), got a `{}` model",
            init.role
        )));
    }
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let mut editor = init.with_role(Role::Editor);
    let mut report = EditorTrainReport::default();
    let mut opt = Adam::new(&editor.net.params, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&samples[order.pop().expect("refilled above")]);
        }
        let (diag, _) = editor_train_step(&mut editor, &mut opt, &batch, stack, cfg, &mut rng).map_err(|e| match e {
            Error::NonFinite { detail, .. } => Error::NonFinite { step, detail },
            other => other,
        })?;
        if !diag.updated {
            report.zero_edit_steps += 1;
        }
        let rec = StepRecord {
            step,
            loss: diag.loss,
            mean_d: diag.mean_d,
            edit_fraction: diag.edit_fraction,
        };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io("<editor report>", e))?;
        }
        if step % 100 == 0 {
            log::info!(
                "editor step {step}: loss {:.4}, mean d {:?}, edits {:.3}",
                rec.loss,
                rec.mean_d,
                rec.edit_fraction
            );
        }
        report.steps.push(rec);
    }
    Ok((editor, report))
}

/// Mean disparity per iteration of `editor` on `samples`, without training.
pub fn mean_disparity(
    editor: &MlmModel,
    samples: &[TrainSample],
    stack: &ScoreStack<'_>,
    iterations: usize,
    clip: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let rollouts: Vec<Rollout> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            rollout(
                editor,
                s,
                stack,
                iterations,
                clip,
                &mut ChaCha8Rng::seed_from_u64(crate::generation::derive_seed(seed, i as u64)),
            )
        })
        .collect::<Result<_>>()?;
    Ok(mean_per_iteration(&rollouts, iterations))
}
