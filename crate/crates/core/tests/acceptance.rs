//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeSet;
use std::ops::Range;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use scope_core::backbone::stub::{StubResponse, StubServer};
use scope_core::backbone::{http_generate, HttpCompletionConfig};
use scope_core::backbone::{BackboneError, FixedBackbone};
use scope_core::editor::{edit_block, iterative_edit, ml_edit_block, se_edit, EditConfig, Editing, EditorEnsemble};
use scope_core::eval::distinct_n;
use scope_core::generation::{block_size_sweep, scope_generate, GenerationRequest};
use scope_core::model::{Adam, MlmModel, ModelConfig, Role, TokenRules};
use scope_core::pipeline::{run_all, PipelineConfig};
use scope_core::scoring::{
    disc_score, mlm_score, repetition_per_pos, repetition_score, score_disparity, total_score, Discriminator, ScoreStack, ScoreWeights,
};
use scope_core::text::{TokenId, TokenSeq};
use scope_core::training::{editor_train_step, rollout, weighted_nll, weighted_nll_and_grad, EditorTrainConfig, IterationRecord, TrainSample};

const SPECIALS: [TokenId; 4] = [0, 1, 2, 3];
const MASK: TokenId = 1;

fn rules() -> TokenRules {
    TokenRules {
        mask: Some(MASK),
        suppressed: SPECIALS.to_vec(),
    }
}

fn config(vocab: usize, d: usize, max_len: usize, bias: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: d,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 2 * d,
        max_len,
        dropout: 0.0,
        distance_bias: bias,
    }
}

fn mlm(cfg: ModelConfig, role: Role, seed: u64) -> MlmModel {
    MlmModel::new(cfg, rules(), role, seed).unwrap()
}

/// Content tokens only, drawn from `[4, 4 + alphabet)`.
fn tokens(rng: &mut impl Rng, len: usize, alphabet: u32) -> Vec<TokenId> {
    (0..len).map(|_| 4 + rng.random_range(0..alphabet)).collect()
}

fn tokens_in(rng: &mut impl Rng, lens: impl rand::distr::uniform::SampleRange<usize>, alphabet: u32) -> Vec<TokenId> {
    let len = rng.random_range(lens);
    tokens(rng, len, alphabet)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

// ---------------------------------------------------------------- oracles

fn rep_oracle(seq: &[TokenId]) -> Vec<f64> {
    let mut out = vec![0.0; seq.len()];
    for (t, o) in out.iter_mut().enumerate() {
        for i in 0..seq.len() {
            if i != t && seq[i] == seq[t] {
                *o -= 1.0 / (i as f64 - t as f64).abs();
            }
        }
    }
    out
}

fn distinct_oracle(samples: &[Vec<TokenId>], n: usize) -> Option<f64> {
    let mut sum = 0.0;
    let mut used = 0;
    for s in samples.iter().filter(|s| s.len() >= n) {
        let total = s.len() + 1 - n;
        let unique: BTreeSet<Vec<TokenId>> = (0..total).map(|i| s[i..i + n].to_vec()).collect();
        sum += unique.len() as f64 / total as f64;
        used += 1;
    }
    (used > 0).then(|| sum / used as f64)
}

// ---------------------------------------------------------------- criteria

fn score_oracles() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 0..1000 {
        let len = rng.random_range(1..=64);
        let alphabet = rng.random_range(1..=12);
        let seq = tokens(&mut rng, len, alphabet);
        let want = rep_oracle(&seq);
        if repetition_per_pos(&seq) != want || repetition_score(&seq).rep_per_pos != want {
            return Err(format!("repetition mismatch on sequence {k}: {seq:?}"));
        }
        let samples: Vec<Vec<TokenId>> = (0..rng.random_range(1..5))
            .map(|_| {
                let l = rng.random_range(0..=64);
                tokens(&mut rng, l, alphabet)
            })
            .collect();
        let seqs: Vec<TokenSeq> = samples.iter().cloned().map(TokenSeq).collect();
        for n in 1..=4 {
            match (distinct_n(&seqs, n).ok(), distinct_oracle(&samples, n)) {
                (a, b) if a == b => {}
                (a, b) => return Err(format!("distinct-{n} on set {k}: {a:?} vs oracle {b:?}")),
            }
        }
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(10) {
        return Err(format!("took {elapsed:?}"));
    }
    Ok(format!("1000 sequences, {elapsed:.2?}"))
}

fn batched_mlm_fidelity() -> Result<String, String> {
    let model = mlm(config(24, 16, 64, true), Role::Scorer, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for k in 0..100 {
        let len = rng.random_range(1..=64);
        let seq = tokens(&mut rng, len, 20);
        let batched = mlm_score(&model, &seq).map_err(|e| e.to_string())?.mlm_per_pos;
        for t in 0..len {
            let mut masked = seq.clone();
            masked[t] = MASK;
            let full = model.net.forward(&masked).map_err(|e| e.to_string())?;
            let want = full.row(t)[seq[t] as usize];
            if batched[t].to_bits() != want.to_bits() {
                return Err(format!("sequence {k} position {t}: {} vs {want}", batched[t]));
            }
        }
    }
    Ok("100 sequences bit-exact".into())
}

fn score_linearity() -> Result<String, String> {
    let model = mlm(config(20, 8, 48, true), Role::Scorer, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let mut disc = Discriminator::zeros(20);
        disc.weights.iter_mut().for_each(|w| *w = rng.random_range(-2.0..2.0));
        disc.bias = rng.random_range(-1.0..1.0);
        let w = ScoreWeights {
            alpha: rng.random_range(0.0..=5.0),
            beta: rng.random_range(0.0..=5.0),
            ..ScoreWeights::default()
        };
        let len = rng.random_range(1..=48);
        let seq = tokens(&mut rng, len, 6);
        let got = total_score(&seq, &model, Some(&disc), &w).map_err(|e| e.to_string())?;
        let rep = rep_oracle(&seq);
        let dsc = disc_score(&disc, &seq);
        for t in 0..len {
            let mut masked = seq.clone();
            masked[t] = MASK;
            let m = model.net.forward(&masked).map_err(|e| e.to_string())?.row(t)[seq[t] as usize];
            let want = m + w.alpha * rep[t] + w.beta * dsc;
            worst = worst.max((got.total_per_pos[t] - want).abs() / want.abs().max(1.0));
        }
    }
    if worst > 1e-6 {
        return Err(format!("worst relative error {worst:e}"));
    }
    Ok(format!("worst relative error {worst:.1e}"))
}

fn disparity_contract() -> Result<String, String> {
    let scorer = mlm(config(16, 8, 40, true), Role::Scorer, 7);
    let mut disc = Discriminator::zeros(16);
    disc.weights[5] = 1.5;
    let stack = ScoreStack::standard(&scorer, Some(&disc), &ScoreWeights::default()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (mut changed, mut clipped) = (0usize, 0usize);
    for k in 0..500 {
        let x = tokens_in(&mut rng, 0..16, 12);
        let ylen = rng.random_range(1..=24);
        let y_tilde = tokens(&mut rng, ylen, 12);
        let s = rng.random_range(0..ylen);
        let e = rng.random_range(s + 1..=ylen);
        let mut y_hat = y_tilde.clone();
        for tok in &mut y_hat[s..e] {
            if rng.random_bool(0.5) {
                *tok = 4 + rng.random_range(0..12);
            }
        }
        let clip = if rng.random_bool(0.5) {
            rng.random_range(0.01..0.5)
        } else {
            rng.random_range(0.5..20.0)
        };
        let d = score_disparity(&x, &y_tilde, &y_hat, s..e, &stack, clip).map_err(|e| e.to_string())?;
        if d.len() != e - s {
            return Err(format!("event {k}: {} values for a block of {}", d.len(), e - s));
        }
        let edited = TokenSeq::from(&x[..]).concat(&y_hat);
        let input = TokenSeq::from(&x[..]).concat(&y_tilde);
        for (r, &v) in d.iter().enumerate() {
            let t = s + r;
            if v.abs() > clip {
                return Err(format!("event {k}: |d| = {} above clip {clip}", v.abs()));
            }
            if y_hat[t] == y_tilde[t] {
                if v != 0.0 {
                    return Err(format!("event {k}: d = {v} at unchanged position {t}"));
                }
                continue;
            }
            changed += 1;
            let p = [x.len() + t];
            let raw = stack.totals_at(&edited, &p).unwrap()[0] - stack.totals_at(&input, &p).unwrap()[0];
            clipped += usize::from(raw.abs() > clip);
            if v != raw.clamp(-clip, clip) {
                return Err(format!("event {k}: d = {v}, expected clamp({raw})"));
            }
        }
    }
    if clipped == 0 {
        return Err("fuzz never exercised clipping".into());
    }
    Ok(format!("500 events, {changed} changed positions, {clipped} clipped"))
}

/// `−1/(N·B) Σ w log p` evaluated from full forwards.
fn loss_oracle(m: &MlmModel, recs: &[IterationRecord], n: usize, b: usize) -> f64 {
    let mut loss = 0.0;
    for r in recs {
        let logits = m.net.forward(&r.input).unwrap();
        for (i, (&y, &w)) in r.targets.iter().zip(&r.weights).enumerate() {
            let row = logits.row(r.rows.start + i);
            let allowed: Vec<usize> = (0..row.len()).filter(|&j| m.rules.allows(j)).collect();
            let mx = allowed.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + allowed.iter().map(|&j| (row[j] - mx).exp()).sum::<f64>().ln();
            loss -= w * (row[y as usize] - lse) / (n * b) as f64;
        }
    }
    loss
}

fn sample(x: Vec<TokenId>, y: Vec<TokenId>) -> TrainSample {
    TrainSample {
        x: TokenSeq(x),
        y_tilde: TokenSeq(y),
        doc: 0,
        offset: 0,
    }
}

fn training_mechanics() -> Result<String, String> {
    let d4 = |v, seed| {
        MlmModel::new(
            ModelConfig {
                n_layers: 1,
                ..config(v, 4, 32, false)
            },
            rules(),
            Role::Editor,
            seed,
        )
        .unwrap()
    };

    // Zero-edit batch: the editor can only emit the token already in place.
    let scorer = d4(9, 1).with_role(Role::Scorer);
    let mut only = rules();
    only.suppressed.extend([4, 6, 7, 8]);
    let mut editor = MlmModel { rules: only, ..d4(9, 2) };
    let before = editor.net.params.clone();
    let stack = ScoreStack::standard(&scorer, None, &ScoreWeights::default()).map_err(|e| e.to_string())?;
    let s = sample(vec![6, 7, 8], vec![5, 5, 5, 5]);
    let cfg = EditorTrainConfig::default();
    let mut opt = Adam::new(&editor.net.params, cfg.adam);
    let (diag, _) =
        editor_train_step(&mut editor, &mut opt, &[&s, &s], &stack, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| e.to_string())?;
    if diag.updated || diag.loss != 0.0 || opt.steps_taken() != 0 || editor.net.params != before {
        return Err(format!("zero-edit batch moved the editor: {diag:?}"));
    }

    // Frozen-weight gradient against central differences.
    let editor = d4(10, 3);
    let scorer = d4(10, 4).with_role(Role::Scorer);
    let stack = ScoreStack::standard(&scorer, None, &ScoreWeights::default()).map_err(|e| e.to_string())?;
    let s = sample(vec![5, 6, 7, 8, 5], vec![6, 6, 7, 9]);
    let recs = (0..50)
        .map(|seed| {
            rollout(&editor, &s, &stack, 2, 10.0, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap()
                .records
        })
        .find(|r| r.iter().flat_map(|r| &r.weights).filter(|w| **w != 0.0).count() >= 3)
        .ok_or("no rollout produced edits")?;
    let (loss, g) = weighted_nll_and_grad(&editor, &recs, 2, 1).map_err(|e| e.to_string())?;
    let g = g.ok_or("no gradient")?;
    if rel_err(loss, loss_oracle(&editor, &recs, 2, 1)) > 1e-12 {
        return Err(format!("loss {loss} disagrees with the oracle"));
    }
    let h = 1e-5;
    let n = editor.net.params.num_params();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut plus = editor.clone();
        *plus.net.params.scalar_mut(i) += h;
        let mut minus = editor.clone();
        *minus.net.params.scalar_mut(i) -= h;
        let fd = (loss_oracle(&plus, &recs, 2, 1) - loss_oracle(&minus, &recs, 2, 1)) / (2.0 * h);
        let a = g.scalar(i);
        worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-4));
    }
    if worst >= 1e-3 {
        return Err(format!("gradient worst relative error {worst:e}"));
    }

    // 1/N averaging: N = 2 against the oracle, then doubled.
    let l2 = weighted_nll(&editor, &recs, 2, 1).map_err(|e| e.to_string())?;
    let l4 = weighted_nll(&editor, &recs, 4, 1).map_err(|e| e.to_string())?;
    let l2b2 = weighted_nll(&editor, &recs, 2, 2).map_err(|e| e.to_string())?;
    if rel_err(l2, loss_oracle(&editor, &recs, 2, 1)) > 1e-12 || rel_err(l4, l2 / 2.0) > 1e-14 || rel_err(l2b2, l2 / 2.0) > 1e-14 {
        return Err(format!("averaging: N=2 {l2}, N=4 {l4}, B=2 {l2b2}"));
    }
    Ok(format!("{n} parameters, gradient worst relative error {worst:.1e}"))
}

fn generation_cost_law() -> Result<String, String> {
    let start = Instant::now();
    let editor = mlm(config(12, 8, 96, true), Role::Editor, 8);
    let backbone = FixedBackbone { tokens: vec![4, 5, 6, 7, 8] };
    let edit = EditConfig {
        block_size: 16,
        iterations: 2,
        ..EditConfig::default()
    };
    let req = GenerationRequest::new(TokenSeq(vec![4, 5, 6, 7]), 128, edit, 3);
    let trace = scope_generate(&backbone, Editing::Single(&editor), None, &req).map_err(|e| e.to_string())?;
    let (calls, passes) = (trace.ledger.backbone_calls, trace.ledger.editor_passes);
    if (calls, passes) != (8, 16) || trace.continuation().len() != 128 {
        return Err(format!("l=128 b=16 N=2: {calls} backbone calls, {passes} editor passes"));
    }
    let rows = block_size_sweep(&backbone, Editing::Single(&editor), None, &req, &[4, 8, 16, 32]).map_err(|e| e.to_string())?;
    let passes: Vec<u64> = rows.iter().map(|r| r.ledger.editor_passes).collect();
    let calls: Vec<u64> = rows.iter().map(|r| r.ledger.backbone_calls).collect();
    if passes != [64, 32, 16, 8] || calls != [32, 16, 8, 4] {
        return Err(format!("sweep editor passes {passes:?}, backbone calls {calls:?}"));
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(60) {
        return Err(format!("took {elapsed:?}"));
    }
    Ok(format!("sweep editor passes {passes:?}, {elapsed:.2?}"))
}

fn random_block(rng: &mut impl Rng, len: usize) -> Range<usize> {
    let s = rng.random_range(0..len);
    s..rng.random_range(s + 1..=len)
}

fn edit_locality() -> Result<String, String> {
    let editor = mlm(config(14, 8, 64, true), Role::Editor, 9);
    let other = mlm(config(14, 8, 64, true), Role::Editor, 10);
    let pair = EditorEnsemble::new(vec![(editor.clone(), 0.7), (other, 0.3)]).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut changed = 0usize;
    for k in 0..1000u64 {
        let x = tokens_in(&mut rng, 0..24, 10);
        let y = tokens_in(&mut rng, 1..=32, 10);
        let block = random_block(&mut rng, y.len());
        let cfg = EditConfig {
            iterations: rng.random_range(1..=3),
            seed: k,
            temperature: rng.random_range(0.5..2.0),
            ..EditConfig::default()
        };
        let outs = match k % 3 {
            0 => iterative_edit(&editor, &x, &y, block.clone(), &cfg, None).map(|o| o.output),
            1 => ml_edit_block(&pair, &x, &y, block.clone(), cfg.temperature, k),
            _ => se_edit(&pair, &x, &y, block.clone(), &cfg, None).map(|o| o.output),
        }
        .map_err(|e| e.to_string())?;
        if outs.len() != y.len() {
            return Err(format!("edit {k}: length {} from {}", outs.len(), y.len()));
        }
        if outs[..block.start] != y[..block.start] || outs[block.end..] != y[block.end..] {
            return Err(format!("edit {k}: tokens outside {block:?} changed"));
        }
        changed += (block.clone()).filter(|&t| outs[t] != y[t]).count();
    }
    if changed == 0 {
        return Err("no edit changed any token".into());
    }
    Ok(format!("1000 edits, {changed} tokens changed inside blocks"))
}

fn reduction_laws() -> Result<String, String> {
    let editor = mlm(config(14, 8, 64, true), Role::Editor, 11);
    let single = EditorEnsemble::single(editor.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for k in 0..300u64 {
        let x = tokens_in(&mut rng, 0..24, 10);
        let y = tokens_in(&mut rng, 1..=32, 10);
        let block = random_block(&mut rng, y.len());
        let temperature = rng.random_range(0.5..2.0);
        let ml = ml_edit_block(&single, &x, &y, block.clone(), temperature, k).map_err(|e| e.to_string())?;
        let one = edit_block(&editor, &x, &y, block.clone(), temperature, k).map_err(|e| e.to_string())?;
        if ml != one {
            return Err(format!("case {k}: mixed logits with one editor differ from the editor"));
        }
        let cfg = EditConfig {
            iterations: rng.random_range(1..=3),
            seed: k,
            temperature,
            ..EditConfig::default()
        };
        let se = se_edit(&single, &x, &y, block.clone(), &cfg, None).map_err(|e| e.to_string())?;
        let it = iterative_edit(&editor, &x, &y, block, &cfg, None).map_err(|e| e.to_string())?;
        if se.output != it.output || se.iterations != it.iterations {
            return Err(format!("case {k}: sequential editing with one editor differs from iterative editing"));
        }
    }
    let backbone = FixedBackbone { tokens: vec![4, 9, 6, 11] };
    let req = GenerationRequest::new(
        TokenSeq(vec![5, 6, 7]),
        40,
        EditConfig {
            block_size: 8,
            ..EditConfig::default()
        },
        4,
    );
    let a = scope_generate(&backbone, Editing::Single(&editor), None, &req).map_err(|e| e.to_string())?;
    let b = scope_generate(&backbone, Editing::MixedLogits(&single), None, &req).map_err(|e| e.to_string())?;
    let c = scope_generate(&backbone, Editing::Sequential(&single), None, &req).map_err(|e| e.to_string())?;
    if a.continuation() != b.continuation() || a.continuation() != c.continuation() {
        return Err("generation with a one-member ensemble differs from the single editor".into());
    }
    Ok("300 block cases and one generation identical".into())
}

/// Regression bounds for the desk-scale run. `pilot` holds the values of the
/// run they were set from.
#[derive(Debug, Deserialize)]
struct Thresholds {
    pilot: serde_json::Value,
    min_positive_block_fraction: f64,
    min_accuracy_delta: f64,
    min_heldout_accuracy_delta: f64,
    max_abs_distinct2_delta: f64,
    max_minutes: f64,
}

fn desk_controllability() -> Result<String, String> {
    let th: Thresholds = serde_json::from_str(include_str!("data/controllability.json")).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = PipelineConfig {
        root: dir.path().to_path_buf(),
        ..PipelineConfig::default()
    };
    if cfg.trainset.count < 2000 || cfg.editor.steps < 1000 {
        return Err(format!(
            "default run too small: {} samples, {} editor steps",
            cfg.trainset.count, cfg.editor.steps
        ));
    }
    if (cfg.generate.prompts, cfg.generate.length, cfg.edit.block_size, cfg.edit.iterations) != (100, 128, 16, 2) {
        return Err("default generation setup is not 100 × l=128, b=16, N=2".into());
    }
    let start = Instant::now();
    let report = run_all(&cfg).map_err(|e| e.to_string())?;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let s = &report.scope;
    let delta = &report.deltas;
    let positive = s.positive_block_fraction.ok_or("no traced block scores")?;
    let heldout = delta.heldout_accuracy.ok_or("no held-out discriminator")?;
    let iters = &s.iteration_scores;
    let summary = format!(
        "positive blocks {positive:.3} (pilot {}), Δacc {:.3}/{heldout:.3}, Δdistinct-2 {:+.3}, iterations {iters:.3?}, {minutes:.1} min",
        th.pilot["positive_block_fraction"], delta.classifier_accuracy, delta.distinct_2
    );
    let mut failed = Vec::new();
    if positive < th.min_positive_block_fraction {
        failed.push("positive block fraction");
    }
    if delta.classifier_accuracy < th.min_accuracy_delta || heldout < th.min_heldout_accuracy_delta {
        failed.push("accuracy delta");
    }
    if delta.distinct_2.abs() > th.max_abs_distinct2_delta {
        failed.push("distinct-2 delta");
    }
    if iters.len() != 3 || !(iters[2] >= iters[1] && iters[1] >= iters[0]) {
        failed.push("iteration monotonicity");
    }
    if minutes > th.max_minutes {
        failed.push("time budget");
    }
    if failed.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}: {summary}", failed.join(", ")))
    }
}

fn http_adapter() -> Result<String, String> {
    const KEY_VAR: &str = "SCOPE_ACCEPTANCE_KEY";
    std::env::set_var(KEY_VAR, "sk-test-123");
    let cfg = |url: String| HttpCompletionConfig {
        base_url: url,
        model_name: "toy-7".into(),
        auth_env_var: KEY_VAR.into(),
        max_retries: 3,
        backoff_base_ms: 40,
        timeout_ms: 2000,
        temperature: 0.7,
        requests_per_sec: 0.0,
        system_field: None,
    };

    // Two retryable failures, then success.
    let server =
        StubServer::start(vec![StubResponse::status(503), StubResponse::status(429), StubResponse::ok_text(" b c")]).map_err(|e| e.to_string())?;
    let text = http_generate(&cfg(server.base_url()), "a", 5).map_err(|e| e.to_string())?;
    if text != " b c" {
        return Err(format!("completion text {text:?}"));
    }
    let reqs = server.requests();
    if reqs.len() != 3 {
        return Err(format!("{} requests for two retries", reqs.len()));
    }
    for (r, want) in reqs.windows(2).zip([40u64, 80]) {
        let gap = r[1].at.duration_since(r[0].at);
        if gap < Duration::from_millis(want) || gap > Duration::from_millis(want + 400) {
            return Err(format!("backoff gap {gap:?}, expected about {want} ms"));
        }
    }
    let r = &reqs[0];
    if r.method != "POST" || r.path != "/v1/completions" || r.header("authorization") != Some("Bearer sk-test-123") {
        return Err(format!("request line or auth: {} {} {:?}", r.method, r.path, r.header("authorization")));
    }
    let want = serde_json::json!({ "model": "toy-7", "prompt": "a", "max_tokens": 5, "temperature": 0.7 });
    if r.json() != want {
        return Err(format!("request body {}", r.body));
    }

    // Error taxonomy.
    let server = StubServer::start(vec![StubResponse::status(400)]).map_err(|e| e.to_string())?;
    let e = http_generate(&cfg(server.base_url()), "a", 1).unwrap_err();
    if !matches!(e, BackboneError::Status { code: 400, .. }) || server.requests().len() != 1 {
        return Err(format!("400 gave {e:?} after {} requests", server.requests().len()));
    }
    let server = StubServer::start(vec![StubResponse::status(500)]).map_err(|e| e.to_string())?;
    let e = http_generate(&cfg(server.base_url()), "a", 1).unwrap_err();
    if !matches!(e, BackboneError::Transport { attempts: 4, .. }) || server.requests().len() != 4 {
        return Err(format!("persistent 500 gave {e:?}"));
    }
    let server = StubServer::start(vec![StubResponse {
        status: 200,
        body: "{\"choices\": []}".into(),
    }])
    .map_err(|e| e.to_string())?;
    let e = http_generate(&cfg(server.base_url()), "a", 1).unwrap_err();
    if !matches!(e, BackboneError::Protocol(_)) {
        return Err(format!("malformed body gave {e:?}"));
    }
    let missing = HttpCompletionConfig {
        auth_env_var: "SCOPE_ACCEPTANCE_UNSET".into(),
        ..cfg(server.base_url())
    };
    if !matches!(http_generate(&missing, "a", 1), Err(BackboneError::Config(_))) {
        return Err("missing key is not a configuration error".into());
    }
    let closed = std::net::TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let url = format!("http://{}/v1", closed.local_addr().unwrap());
    drop(closed);
    let e = http_generate(
        &HttpCompletionConfig {
            max_retries: 1,
            backoff_base_ms: 1,
            ..cfg(url)
        },
        "a",
        1,
    )
    .unwrap_err();
    if !matches!(e, BackboneError::Transport { attempts: 2, .. }) {
        return Err(format!("refused connection gave {e:?}"));
    }
    Ok("backoff 40/80 ms, auth, body and error kinds as specified".into())
}

type Criterion = fn() -> Result<String, String>;

fn main() {
    let criteria: [(&str, Criterion); 10] = [
        ("score-oracles", score_oracles),
        ("batched-mlm-fidelity", batched_mlm_fidelity),
        ("score-linearity", score_linearity),
        ("disparity-contract", disparity_contract),
        ("training-mechanics", training_mechanics),
        ("generation-cost-law", generation_cost_law),
        ("edit-locality", edit_locality),
        ("reduction-laws", reduction_laws),
        ("desk-controllability", desk_controllability),
        ("http-adapter", http_adapter),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name} ({detail}) [{:.1?}]", start.elapsed()),
            Err(detail) => {
                failures += 1;
                println!("FAIL {name}: {detail} [{:.1?}]", start.elapsed());
            }
        }
    }
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
}
