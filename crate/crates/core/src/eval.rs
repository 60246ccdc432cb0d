//! Evaluation metrics and paired system comparison.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::GenerationTrace;
use crate::model::CausalModel;
use crate::scoring::{disc_score, Discriminator};
use crate::tensor::log_sum_exp;
use crate::text::{TokenId, TokenSeq};

/// Unique n-grams over total n-grams, averaged over samples. Samples
/// shorter than `n` are skipped.
pub fn distinct_n(samples: &[TokenSeq], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for s in samples {
        if s.len() < n {
            continue;
        }
        let grams: Vec<&[TokenId]> = s.windows(n).collect();
        let unique: HashSet<&[TokenId]> = grams.iter().copied().collect();
        sum += unique.len() as f64 / grams.len() as f64;
        used += 1;
    }
    let skipped = samples.len() - used;
    if skipped > 0 {
        log::warn!("distinct-{n}: skipped {skipped} samples shorter than {n} tokens");
    }
    if used == 0 {
        return Err(Error::NoSamples);
    }
    Ok(sum / used as f64)
}

/// Fraction of samples the discriminator puts on the target side: logit
/// `≥ 0` for the positive class, `< 0` for the negative one.
pub fn classifier_accuracy(samples: &[TokenSeq], target_positive: bool, disc: &Discriminator) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let hits = samples.iter().filter(|s| (disc_score(disc, s) >= 0.0) == target_positive).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Summed negative log-likelihood of `target` after `context`, the number of
/// scored tokens and whether chunking was needed. Without context the first
/// token is not scored.
/// Sequences longer than the model's window are scored in chunks of half a
/// window, each seeing at most `max_len` tokens of history.
fn nll(reference: &CausalModel, context: &[TokenId], target: &[TokenId]) -> Result<(f64, usize, bool)> {
    let max = reference.config().max_len;
    let seq: Vec<TokenId> = context.iter().chain(target).copied().collect();
    let first = context.len().max(1);
    if first >= seq.len() {
        return Ok((0.0, 0, false));
    }
    let chunked = seq.len() - 1 > max;
    let chunk = if chunked { (max / 2).max(1) } else { seq.len() };
    let mut total = 0.0;
    let mut t = first;
    while t < seq.len() {
        let end = (t + chunk).min(seq.len());
        let s = (end - 1).saturating_sub(max);
        let logits = reference.net.forward(&seq[s..end - 1])?;
        for j in t..end {
            let row = logits.row(j - 1 - s);
            total += log_sum_exp(row, |_| true) - row[seq[j] as usize];
        }
        t = end;
    }
    Ok((total, seq.len() - first, chunked))
}

fn ppl_of(reference: &CausalModel, items: &[(&[TokenId], &[TokenId])]) -> Result<f64> {
    let parts: Vec<(f64, usize, bool)> = items.par_iter().map(|(c, t)| nll(reference, c, t)).collect::<Result<_>>()?;
    let (sum, count) = parts.iter().fold((0.0, 0usize), |(s, c), (a, b, _)| (s + a, c + b));
    let chunked = parts.iter().filter(|p| p.2).count();
    if chunked > 0 {
        log::warn!(
            "perplexity: {chunked} of {} samples exceed the reference window of {}; scored in chunks",
            items.len(),
            reference.config().max_len
        );
    }
    if count == 0 {
        return Err(Error::NoTokens);
    }
    Ok((sum / count as f64).exp())
}

/// `exp` of the mean next-token negative log-likelihood over every
/// predicted token (all but the first of each sample).
pub fn perplexity(samples: &[TokenSeq], reference: &CausalModel) -> Result<f64> {
    let items: Vec<(&[TokenId], &[TokenId])> = samples.iter().map(|s| (&[][..], &s[..])).collect();
    ppl_of(reference, &items)
}

/// Perplexity of each continuation given its prefix; prefix tokens are
/// context only.
pub fn conditional_perplexity(prefixes: &[TokenSeq], continuations: &[TokenSeq], reference: &CausalModel) -> Result<f64> {
    if prefixes.len() != continuations.len() {
        return Err(Error::LengthMismatch(format!(
            "{} prefixes, {} continuations",
            prefixes.len(),
            continuations.len()
        )));
    }
    let items: Vec<(&[TokenId], &[TokenId])> = prefixes.iter().zip(continuations).map(|(p, c)| (&p[..], &c[..])).collect();
    ppl_of(reference, &items)
}

/// Fraction of tokens that belong to `markers`.
pub fn marker_rate(samples: &[TokenSeq], markers: &[TokenId]) -> f64 {
    let set: HashSet<TokenId> = markers.iter().copied().collect();
    let (hit, total) = samples
        .iter()
        .flat_map(|s| s.iter())
        .fold((0usize, 0usize), |(h, t), x| (h + set.contains(x) as usize, t + 1));
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Mean clipped disparity of every block between its raw and final
/// contents, read off the traced scores. Empty when the trace has none.
pub fn block_disparities(trace: &GenerationTrace, clip: f64) -> Vec<f64> {
    trace
        .blocks
        .iter()
        .filter(|b| b.scores.len() >= 2)
        .map(|b| {
            let (first, last) = (&b.scores[0], &b.scores[b.scores.len() - 1]);
            let d: f64 = (0..b.raw.len())
                .filter(|&t| b.raw[t] != b.edited[t])
                .map(|t| (last.total_per_pos[t] - first.total_per_pos[t]).clamp(-clip, clip))
                .sum();
            d / b.raw.len() as f64
        })
        .collect()
}

/// Mean per-token total score at every traced iteration, over all blocks of
/// all traces.
pub fn iteration_means(traces: &[GenerationTrace]) -> Vec<f64> {
    let blocks: Vec<_> = traces.iter().flat_map(|t| &t.blocks).filter(|b| !b.scores.is_empty()).collect();
    let Some(n) = blocks.iter().map(|b| b.scores.len()).min() else {
        return Vec::new();
    };
    (0..n)
        .map(|i| blocks.iter().map(|b| b.scores[i].mean_total()).sum::<f64>() / blocks.len() as f64)
        .collect()
}

/// Mean over blocks of the per-token score change from raw to edited
/// contents. Unedited traces get 0 even without scores.
fn score_delta(trace: &GenerationTrace) -> Option<f64> {
    if trace.blocks.iter().all(|b| b.raw == b.edited) {
        return Some(0.0);
    }
    let deltas: Vec<f64> = trace
        .blocks
        .iter()
        .filter(|b| !b.scores.is_empty())
        .map(|b| b.scores[b.scores.len() - 1].mean_total() - b.scores[0].mean_total())
        .collect();
    (!deltas.is_empty()).then(|| deltas.iter().sum::<f64>() / deltas.len() as f64)
}

/// What the metrics are computed against.
pub struct EvalSetup<'a> {
    pub disc: &'a Discriminator,
    /// Second discriminator trained on disjoint data.
    pub heldout: Option<&'a Discriminator>,
    /// Whether the target attribute is the discriminator's positive class.
    pub target_positive: bool,
    pub reference: &'a CausalModel,
    /// Characteristic tokens of the target attribute.
    pub markers: Vec<TokenId>,
    pub clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub prefix: TokenSeq,
    pub continuation: TokenSeq,
    pub disc_logit: f64,
    pub heldout_logit: Option<f64>,
    pub marker_rate: f64,
    /// Mean per-token score change from raw to edited blocks.
    pub score_delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arm: String,
    pub samples: usize,
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub distinct_3: f64,
    pub classifier_accuracy: f64,
    pub heldout_accuracy: Option<f64>,
    pub ppl: f64,
    /// Mean per-token target-score change made by editing (0 for unedited
    /// output, `None` when the traces carry no scores).
    pub mean_score_delta: Option<f64>,
    pub marker_rate: f64,
    /// Mean per-block disparity, and the fraction of blocks where it is
    /// positive.
    pub mean_block_d: Option<f64>,
    pub positive_block_fraction: Option<f64>,
    /// Mean per-token total score at each editing iteration.
    pub iteration_scores: Vec<f64>,
    /// Reserved for an embedding-based distribution metric; never computed.
    pub mauve: Option<f64>,
    pub records: Vec<SampleRecord>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// All metrics for one system's traces.
pub fn evaluate_traces(arm: &str, traces: &[GenerationTrace], setup: &EvalSetup<'_>) -> Result<EvalReport> {
    if traces.is_empty() {
        return Err(Error::NoSamples);
    }
    let prefixes: Vec<TokenSeq> = traces.iter().map(|t| t.prefix.clone()).collect();
    let conts: Vec<TokenSeq> = traces.iter().map(|t| t.continuation()).collect();
    let heldout_accuracy = setup.heldout.map(|h| classifier_accuracy(&conts, setup.target_positive, h)).transpose()?;
    let block_d: Vec<f64> = traces.iter().flat_map(|t| block_disparities(t, setup.clip)).collect();
    let deltas: Vec<f64> = traces.iter().filter_map(score_delta).collect();
    let records = traces
        .iter()
        .zip(&conts)
        .map(|(t, c)| SampleRecord {
            prefix: t.prefix.clone(),
            continuation: c.clone(),
            disc_logit: disc_score(setup.disc, c),
            heldout_logit: setup.heldout.map(|h| disc_score(h, c)),
            marker_rate: marker_rate(std::slice::from_ref(c), &setup.markers),
            score_delta: score_delta(t),
        })
        .collect();
    Ok(EvalReport {
        arm: arm.to_string(),
        samples: traces.len(),
        distinct_1: distinct_n(&conts, 1)?,
        distinct_2: distinct_n(&conts, 2)?,
        distinct_3: distinct_n(&conts, 3)?,
        classifier_accuracy: classifier_accuracy(&conts, setup.target_positive, setup.disc)?,
        heldout_accuracy,
        ppl: conditional_perplexity(&prefixes, &conts, setup.reference)?,
        mean_score_delta: mean(&deltas),
        marker_rate: marker_rate(&conts, &setup.markers),
        mean_block_d: mean(&block_d),
        positive_block_fraction: (!block_d.is_empty()).then(|| block_d.iter().filter(|&&d| d > 0.0).count() as f64 / block_d.len() as f64),
        iteration_scores: iteration_means(traces),
        mauve: None,
        records,
    })
}

/// `second − first` for every scalar metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricDeltas {
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub distinct_3: f64,
    pub classifier_accuracy: f64,
    pub heldout_accuracy: Option<f64>,
    pub ppl: f64,
    pub mean_score_delta: Option<f64>,
    pub marker_rate: f64,
}

impl MetricDeltas {
    pub fn between(first: &EvalReport, second: &EvalReport) -> Self {
        let opt = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| b - a);
        MetricDeltas {
            distinct_1: second.distinct_1 - first.distinct_1,
            distinct_2: second.distinct_2 - first.distinct_2,
            distinct_3: second.distinct_3 - first.distinct_3,
            classifier_accuracy: second.classifier_accuracy - first.classifier_accuracy,
            heldout_accuracy: opt(first.heldout_accuracy, second.heldout_accuracy),
            ppl: second.ppl - first.ppl,
            mean_score_delta: opt(first.mean_score_delta, second.mean_score_delta),
            marker_rate: second.marker_rate - first.marker_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub backbone: EvalReport,
    pub scope: EvalReport,
    /// `scope − backbone`.
    pub deltas: MetricDeltas,
}

/// Evaluates both arms and their differences. The arms must cover the same
/// prefixes in the same order.
pub fn paired_compare(backbone: &[GenerationTrace], scope: &[GenerationTrace], setup: &EvalSetup<'_>) -> Result<PairedReport> {
    if backbone.len() != scope.len() {
        return Err(Error::LengthMismatch(format!(
            "{} backbone outputs, {} edited outputs",
            backbone.len(),
            scope.len()
        )));
    }
    if let Some(i) = backbone.iter().zip(scope).position(|(a, b)| a.prefix != b.prefix) {
        return Err(Error::LengthMismatch(format!("arms differ in prefix {i}")));
    }
    let b = evaluate_traces("backbone", backbone, setup)?;
    let s = evaluate_traces("scope", scope, setup)?;
    Ok(PairedReport {
        deltas: MetricDeltas::between(&b, &s),
        backbone: b,
        scope: s,
    })
}

impl PairedReport {
    /// Fixed-order text table.
    pub fn table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let rows: Vec<(&str, String, String, String)> = vec![
            (
                "distinct-1",
                format!("{:.4}", self.backbone.distinct_1),
                format!("{:.4}", self.scope.distinct_1),
                format!("{:+.4}", self.deltas.distinct_1),
            ),
            (
                "distinct-2",
                format!("{:.4}", self.backbone.distinct_2),
                format!("{:.4}", self.scope.distinct_2),
                format!("{:+.4}", self.deltas.distinct_2),
            ),
            (
                "distinct-3",
                format!("{:.4}", self.backbone.distinct_3),
                format!("{:.4}", self.scope.distinct_3),
                format!("{:+.4}", self.deltas.distinct_3),
            ),
            (
                "accuracy",
                format!("{:.4}", self.backbone.classifier_accuracy),
                format!("{:.4}", self.scope.classifier_accuracy),
                format!("{:+.4}", self.deltas.classifier_accuracy),
            ),
            (
                "held-out accuracy",
                opt(self.backbone.heldout_accuracy),
                opt(self.scope.heldout_accuracy),
                opt(self.deltas.heldout_accuracy),
            ),
            (
                "ppl",
                format!("{:.3}", self.backbone.ppl),
                format!("{:.3}", self.scope.ppl),
                format!("{:+.3}", self.deltas.ppl),
            ),
            (
                "score delta",
                opt(self.backbone.mean_score_delta),
                opt(self.scope.mean_score_delta),
                opt(self.deltas.mean_score_delta),
            ),
            (
                "marker rate",
                format!("{:.4}", self.backbone.marker_rate),
                format!("{:.4}", self.scope.marker_rate),
                format!("{:+.4}", self.deltas.marker_rate),
            ),
        ];
        let mut out = format!("{:<18} {:>12} {:>12} {:>12}\n", "metric", "backbone", "scope", "delta");
        for (name, a, b, d) in rows {
            out.push_str(&format!("{name:<18} {a:>12} {b:>12} {d:>12}\n"));
        }
        out
    }
}
