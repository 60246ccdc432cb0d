//! Progressive block-wise generation: the backbone writes `b` tokens, the
//! editor rewrites them, and the edited block joins the context of the next
//! backbone call.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneError, BackboneRequest};
use crate::editor::{EditConfig, Editing};
use crate::error::{Error, Result};
use crate::scoring::{ScoreBreakdown, ScoreStack};
use crate::text::TokenSeq;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRequest {
    pub prefix: TokenSeq,
    /// Continuation length `l`.
    pub length: usize,
    pub edit: EditConfig,
    pub seed: u64,
    /// Longest backbone prompt; older context is dropped first, but the
    /// last `2b` tokens are always kept.
    #[serde(default)]
    pub max_context: Option<usize>,
}

impl GenerationRequest {
    pub fn new(prefix: TokenSeq, length: usize, edit: EditConfig, seed: u64) -> Self {
        GenerationRequest {
            prefix,
            length,
            edit,
            seed,
            max_context: None,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.length.div_ceil(self.edit.block_size)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub editor_passes: u64,
    pub scorer_masked_passes: u64,
    pub backbone_calls: u64,
    pub backbone_tokens: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub index: usize,
    /// Offset of the block in the continuation.
    pub start: usize,
    pub raw: TokenSeq,
    pub edited: TokenSeq,
    /// Block contents before and after every editor pass.
    pub iterations: Vec<TokenSeq>,
    /// Block scores per entry of `iterations` (empty unless tracing).
    pub scores: Vec<ScoreBreakdown>,
    /// Cumulative counters after this block.
    pub ledger: CostLedger,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub prefix: TokenSeq,
    pub blocks: Vec<BlockRecord>,
    pub ledger: CostLedger,
}

impl GenerationTrace {
    /// Concatenation of the edited blocks.
    pub fn continuation(&self) -> TokenSeq {
        self.blocks.iter().flat_map(|b| b.edited.iter().copied()).collect()
    }

    pub fn raw_blocks(&self) -> TokenSeq {
        self.blocks.iter().flat_map(|b| b.raw.iter().copied()).collect()
    }

    /// Prefix followed by the continuation.
    pub fn final_sequence(&self) -> TokenSeq {
        self.prefix.concat(&self.continuation())
    }

    /// One JSON object per block.
    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        for b in &self.blocks {
            serde_json::to_writer(&mut *out, b)?;
            out.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_jsonl(&mut f)?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_blocks(path: impl AsRef<Path>) -> Result<Vec<BlockRecord>> {
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
}

/// Mixes a seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn abort(trace: GenerationTrace, source: BackboneError) -> Error {
    Error::GenerationAborted {
        partial: Box::new(trace),
        source,
    }
}

/// Runs the generate-then-edit loop for `⌈l/b⌉` blocks. Block `i` uses
/// backbone seed `derive_seed(seed, 2i)` and editor stream
/// `derive_seed(seed, 2i+1)`, so [`Editing::Identity`] reproduces plain
/// backbone generation. Scores are traced only when `stack` is given.
pub fn scope_generate(
    backbone: &dyn Backbone,
    editing: Editing<'_>,
    stack: Option<&ScoreStack<'_>>,
    req: &GenerationRequest,
) -> Result<GenerationTrace> {
    req.edit.validate()?;
    if req.length == 0 {
        return Err(Error::Config("continuation length must be at least 1".into()));
    }
    if req.prefix.is_empty() {
        return Err(Error::Empty("prefix"));
    }
    let b = req.edit.block_size;
    let vocab_limit = match editing {
        Editing::Single(m) => Some(m.config().vocab_size),
        Editing::MixedLogits(e) | Editing::Sequential(e) => e.members.first().map(|(m, _)| m.config().vocab_size),
        Editing::Identity => None,
    };
    let mut trace = GenerationTrace {
        prefix: req.prefix.clone(),
        blocks: Vec::with_capacity(req.num_blocks()),
        ledger: CostLedger::default(),
    };
    let mut context = req.prefix.clone().into_inner();
    let scored_before = stack.map_or(0, |s| s.masked_passes());
    for i in 0..req.num_blocks() {
        let start = i * b;
        let n = b.min(req.length - start);
        let keep = match req.max_context {
            Some(m) => m.saturating_sub(n).max(2 * b).min(context.len()),
            None => context.len(),
        };
        let breq = BackboneRequest {
            prefix: context[context.len() - keep..].to_vec(),
            n_tokens: n,
            seed: derive_seed(req.seed, 2 * i as u64),
            ..Default::default()
        };
        let raw = match backbone.generate(&breq) {
            Ok(r) if r.len() == n => r,
            Ok(r) => return Err(abort(trace, BackboneError::Protocol(format!("asked for {n} tokens, got {}", r.len())))),
            Err(e) => return Err(abort(trace, e)),
        };
        trace.ledger.backbone_calls += 1;
        trace.ledger.backbone_tokens += n as u64;
        if let (Some(v), Some(&bad)) = (vocab_limit, raw.iter().find(|&&t| t as usize >= vocab_limit.unwrap_or(0))) {
            return Err(Error::TokenOutOfRange { id: bad, size: v });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(req.seed, 2 * i as u64 + 1));
        let out = editing.apply(&context, &raw, 0..n, req.edit.iterations, req.edit.temperature, &mut rng, stack)?;
        trace.ledger.editor_passes += out.passes as u64;
        trace.ledger.scorer_masked_passes = stack.map_or(0, |s| s.masked_passes()) - scored_before;
        context.extend_from_slice(&out.output);
        trace.blocks.push(BlockRecord {
            index: i,
            start,
            raw,
            edited: out.output,
            iterations: out.iterations,
            scores: out.scores,
            ledger: trace.ledger,
        });
    }
    Ok(trace)
}

/// Plain backbone continuation under the same block seeds as
/// [`scope_generate`].
pub fn backbone_generate(backbone: &dyn Backbone, req: &GenerationRequest) -> Result<GenerationTrace> {
    scope_generate(backbone, Editing::Identity, None, req)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub block_size: usize,
    pub ledger: CostLedger,
    pub trace: GenerationTrace,
}

/// [`scope_generate`] once per block size, all with the request's seed.
pub fn block_size_sweep(
    backbone: &dyn Backbone,
    editing: Editing<'_>,
    stack: Option<&ScoreStack<'_>>,
    req: &GenerationRequest,
    sizes: &[usize],
) -> Result<Vec<SweepRow>> {
    if let Some(&bad) = sizes.iter().find(|&&s| s == 0 || s > req.length) {
        return Err(Error::Config(format!("block size {bad} outside [1, {}]", req.length)));
    }
    sizes
        .iter()
        .map(|&b| {
            let r = GenerationRequest {
                edit: EditConfig {
                    block_size: b,
                    ..req.edit.clone()
                },
                ..req.clone()
            };
            let trace = scope_generate(backbone, editing, stack, &r)?;
            Ok(SweepRow {
                block_size: b,
                ledger: trace.ledger,
                trace,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Capabilities, FixedBackbone, LocalBackbone};
    use crate::editor::EditorEnsemble;
    use crate::model::{CausalModel, MlmModel, ModelConfig, Role, TokenRules};
    use crate::scoring::ScoreWeights;
    use crate::text::{TokenId, Vocabulary, DEFAULT_SPECIALS};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 16,
            max_len: 192,
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

    fn vocab() -> Vocabulary {
        let mut t: Vec<String> = DEFAULT_SPECIALS.iter().map(|s| s.to_string()).collect();
        t.extend((5..12).map(|i| format!("t{i}")));
        Vocabulary::from_tokens(t).unwrap()
    }

    fn local() -> LocalBackbone {
        LocalBackbone::new(CausalModel::new(cfg(), rules(), Role::Backbone, 3).unwrap(), vocab(), 1.0).unwrap()
    }

    fn req(length: usize, b: usize) -> GenerationRequest {
        GenerationRequest::new(
            TokenSeq(vec![5, 6, 7, 8]),
            length,
            EditConfig {
                block_size: b,
                ..EditConfig::default()
            },
            11,
        )
    }

    #[test]
    fn ledger_law_for_defaults() {
        let editor = MlmModel::new(cfg(), rules(), Role::Editor, 1).unwrap();
        let t = scope_generate(&FixedBackbone { tokens: vec![9] }, Editing::Single(&editor), None, &req(128, 16)).unwrap();
        assert_eq!(t.ledger.backbone_calls, 8);
        assert_eq!(t.ledger.editor_passes, 16);
        assert_eq!(t.ledger.backbone_tokens, 128);
        assert_eq!(t.ledger.scorer_masked_passes, 0);
        assert_eq!(t.continuation().len(), 128);
    }

    #[test]
    fn partial_final_block_and_sweep() {
        let editor = MlmModel::new(cfg(), rules(), Role::Editor, 1).unwrap();
        let t = scope_generate(&FixedBackbone { tokens: vec![9] }, Editing::Single(&editor), None, &req(20, 8)).unwrap();
        assert_eq!(t.blocks.iter().map(|b| b.raw.len()).collect::<Vec<_>>(), vec![8, 8, 4]);
        let rows = block_size_sweep(
            &FixedBackbone { tokens: vec![9] },
            Editing::Single(&editor),
            None,
            &req(128, 16),
            &[4, 8, 16, 32],
        )
        .unwrap();
        assert_eq!(rows.iter().map(|r| r.ledger.editor_passes).collect::<Vec<_>>(), vec![64, 32, 16, 8]);
        assert!(block_size_sweep(&FixedBackbone { tokens: vec![9] }, Editing::Single(&editor), None, &req(8, 4), &[16]).is_err());
    }

    #[test]
    fn sequential_ledger_counts_every_editor() {
        let e = EditorEnsemble::new(vec![
            (MlmModel::new(cfg(), rules(), Role::Editor, 1).unwrap(), 1.0),
            (MlmModel::new(cfg(), rules(), Role::Editor, 2).unwrap(), 1.0),
        ])
        .unwrap();
        let t = scope_generate(&FixedBackbone { tokens: vec![9] }, Editing::Sequential(&e), None, &req(32, 8)).unwrap();
        assert_eq!(t.ledger.editor_passes, 2 * 2 * 4);
    }

    #[test]
    fn identity_editing_equals_backbone_generation() {
        let bb = local();
        let r = req(40, 16);
        let id = scope_generate(&bb, Editing::Identity, None, &r).unwrap();
        let plain = backbone_generate(&bb, &r).unwrap();
        assert_eq!(id.final_sequence(), plain.final_sequence());
        assert_eq!(id.continuation(), id.raw_blocks());
    }

    #[test]
    fn trace_invariants() {
        let bb = local();
        let editor = MlmModel::new(cfg(), rules(), Role::Editor, 4).unwrap();
        let scorer = MlmModel::new(cfg(), rules(), Role::Scorer, 5).unwrap();
        let stack = ScoreStack::standard(&scorer, None, &ScoreWeights::default()).unwrap();
        let r = req(48, 16);
        let t = scope_generate(&bb, Editing::Single(&editor), Some(&stack), &r).unwrap();
        let fin = t.final_sequence();
        assert_eq!(&fin[..4], &r.prefix[..]);
        assert_eq!(fin.len(), 52);
        for b in &t.blocks {
            assert_eq!(b.iterations.len(), 3);
            assert_eq!(b.scores.len(), 3);
            assert_eq!(b.iterations[0], b.raw);
            assert_eq!(b.iterations[2], b.edited);
            assert_eq!(b.scores[0].start, 4 + b.start);
        }
        // Scoring 3 snapshots of 16 positions per block.
        assert_eq!(t.ledger.scorer_masked_passes, 3 * 3 * 16);
        let again = scope_generate(&bb, Editing::Single(&editor), None, &r).unwrap();
        assert_eq!(again.continuation(), t.continuation());

        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        let back: BlockRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, t.blocks[0]);
    }

    /// Records every prompt and fails on a chosen call.
    struct Scripted {
        prompts: Mutex<Vec<Vec<TokenId>>>,
        calls: AtomicUsize,
        fail_at: usize,
    }

    impl Backbone for Scripted {
        fn capabilities(&self) -> Capabilities {
            Capabilities::default()
        }
        fn generate(&self, req: &BackboneRequest) -> std::result::Result<TokenSeq, BackboneError> {
            if self.calls.fetch_add(1, Ordering::SeqCst) == self.fail_at {
                return Err(BackboneError::Transport {
                    attempts: 1,
                    message: "down".into(),
                });
            }
            self.prompts.lock().unwrap().push(req.prefix.clone());
            Ok(TokenSeq(vec![10; req.n_tokens]))
        }
    }

    #[test]
    fn edited_history_feeds_the_backbone() {
        let editor = MlmModel::new(cfg(), rules(), Role::Editor, 6).unwrap();
        let bb = Scripted {
            prompts: Mutex::default(),
            calls: AtomicUsize::new(0),
            fail_at: usize::MAX,
        };
        let t = scope_generate(&bb, Editing::Single(&editor), None, &req(24, 8)).unwrap();
        let prompts = bb.prompts.lock().unwrap();
        assert_eq!(prompts[1], t.prefix.concat(&t.blocks[0].edited).0);
        assert_eq!(prompts[2], t.prefix.concat(&t.blocks[0].edited).concat(&t.blocks[1].edited).0);
    }

    #[test]
    fn context_window_keeps_last_two_blocks() {
        let bb = Scripted {
            prompts: Mutex::default(),
            calls: AtomicUsize::new(0),
            fail_at: usize::MAX,
        };
        let r = GenerationRequest {
            max_context: Some(10),
            ..req(40, 8)
        };
        scope_generate(&bb, Editing::Identity, None, &r).unwrap();
        let prompts = bb.prompts.lock().unwrap();
        assert_eq!(prompts[0].len(), 4);
        assert_eq!(prompts[1].len(), 12);
        assert!(prompts[2..].iter().all(|p| p.len() == 16));
    }

    #[test]
    fn backbone_failure_returns_partial_trace() {
        let bb = Scripted {
            prompts: Mutex::default(),
            calls: AtomicUsize::new(0),
            fail_at: 2,
        };
        match scope_generate(&bb, Editing::Identity, None, &req(32, 8)) {
            Err(Error::GenerationAborted { partial, .. }) => assert_eq!(partial.blocks.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn seeds_are_well_mixed() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }
}
