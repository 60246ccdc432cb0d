//! Masked-LM and causal-LM training steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::optim::Adam;
use super::params::Params;
use super::transformer::Transformer;
use super::{CausalModel, MlmModel};
use crate::error::{Error, Result};
use crate::tensor::masked_softmax;
use crate::text::{TokenId, TokenSeq};

/// A batch with some positions selected for prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    /// Corrupted inputs fed to the model.
    pub inputs: Vec<Vec<TokenId>>,
    /// Original token at selected positions, `None` elsewhere.
    pub targets: Vec<Vec<Option<TokenId>>>,
}

impl MaskedBatch {
    pub fn selected(&self) -> usize {
        self.targets.iter().flatten().filter(|t| t.is_some()).count()
    }

    pub fn positions(&self) -> usize {
        self.targets.iter().map(Vec::len).sum()
    }
}

/// Selects each position with probability `mask_rate` (at least one per
/// sequence). Selected positions become MASK 80% of the time, a random
/// sampleable token 10% of the time and stay unchanged otherwise.
pub fn mask_batch(model: &MlmModel, batch: &[TokenSeq], mask_rate: f64, rng: &mut impl Rng) -> Result<MaskedBatch> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::Config(format!("mask_rate {mask_rate} outside (0, 1)")));
    }
    let mask = model.mask_id()?;
    let replacements: Vec<TokenId> = (0..model.config().vocab_size as TokenId)
        .filter(|&id| id != mask && model.rules.allows(id as usize))
        .collect();
    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for seq in batch {
        if seq.is_empty() {
            return Err(Error::Empty("sequence in batch"));
        }
        let mut chosen: Vec<bool> = (0..seq.len()).map(|_| rng.random::<f64>() < mask_rate).collect();
        if !chosen.iter().any(|&c| c) {
            chosen[rng.random_range(0..seq.len())] = true;
        }
        let mut input = seq.to_vec();
        let mut target = vec![None; seq.len()];
        for (i, _) in chosen.iter().enumerate().filter(|(_, c)| **c) {
            target[i] = Some(seq[i]);
            let r: f64 = rng.random();
            if r < 0.8 {
                input[i] = mask;
            } else if r < 0.9 && !replacements.is_empty() {
                input[i] = replacements[rng.random_range(0..replacements.len())];
            }
        }
        inputs.push(input);
        targets.push(target);
    }
    Ok(MaskedBatch { inputs, targets })
}

/// Cross-entropy of the selected positions of one sequence plus its gradient
/// with respect to the logits, scaled by `1/denom`.
fn ce_rows(
    net: &Transformer,
    ids: &[TokenId],
    targets: &[Option<TokenId>],
    denom: f64,
    rng: Option<&mut ChaCha8Rng>,
    want_grad: bool,
) -> Result<(f64, Option<Params>)> {
    let cache = net.forward_train(ids, rng)?;
    let v = net.config.vocab_size;
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; ids.len() * v];
    for (t, target) in targets.iter().enumerate() {
        let Some(y) = *target else { continue };
        let probs = masked_softmax(cache.logits.row(t), |_| true, 1.0);
        loss -= probs[y as usize].ln();
        let row = &mut dlogits[t * v..(t + 1) * v];
        for (d, p) in row.iter_mut().zip(&probs) {
            *d = p / denom;
        }
        row[y as usize] -= 1.0 / denom;
    }
    let grads = want_grad.then(|| net.backward(&cache, &dlogits));
    Ok((loss, grads))
}

fn batch_loss(
    net: &Transformer,
    inputs: &[&[TokenId]],
    targets: &[Vec<Option<TokenId>>],
    dropout_seeds: Option<&[u64]>,
    want_grad: bool,
) -> Result<(f64, Option<Params>)> {
    let denom = targets.iter().flatten().filter(|t| t.is_some()).count() as f64;
    if denom == 0.0 {
        return Err(Error::Empty("no predicted positions in batch"));
    }
    let parts: Vec<(f64, Option<Params>)> = (0..inputs.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = dropout_seeds.map(|s| ChaCha8Rng::seed_from_u64(s[i]));
            ce_rows(net, inputs[i], &targets[i], denom, rng.as_mut(), want_grad)
        })
        .collect::<Result<_>>()?;
    let loss = parts.iter().map(|(l, _)| l).sum::<f64>() / denom;
    let grads = if want_grad {
        Params::sum_in_order(parts.into_iter().filter_map(|(_, g)| g).collect())
    } else {
        None
    };
    Ok((loss, grads))
}

/// Mean masked-position cross-entropy and its gradient. Dropout is applied
/// only when per-sequence seeds are given.
pub fn mlm_loss_and_grad(model: &MlmModel, batch: &MaskedBatch, dropout_seeds: Option<&[u64]>) -> Result<(f64, Params)> {
    let inputs: Vec<&[TokenId]> = batch.inputs.iter().map(Vec::as_slice).collect();
    let (loss, grads) = batch_loss(&model.net, &inputs, &batch.targets, dropout_seeds, true)?;
    Ok((loss, grads.expect("gradient requested")))
}

pub fn mlm_loss(model: &MlmModel, batch: &MaskedBatch) -> Result<f64> {
    let inputs: Vec<&[TokenId]> = batch.inputs.iter().map(Vec::as_slice).collect();
    Ok(batch_loss(&model.net, &inputs, &batch.targets, None, false)?.0)
}

fn check_finite(loss: f64, grads: &Params, what: &str) -> Result<()> {
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::NonFinite {
            step: 0,
            detail: format!("{what} loss {loss}"),
        });
    }
    Ok(())
}

fn dropout_seeds(n: usize, rate: f64, rng: &mut impl Rng) -> Option<Vec<u64>> {
    (rate > 0.0).then(|| (0..n).map(|_| rng.random()).collect())
}

/// One optimizer step of masked language modelling. Returns the batch loss
/// before the update.
pub fn train_mlm_step(model: &mut MlmModel, batch: &[TokenSeq], mask_rate: f64, opt: &mut Adam, rng: &mut impl Rng) -> Result<f64> {
    let masked = mask_batch(model, batch, mask_rate, rng)?;
    let seeds = dropout_seeds(batch.len(), model.config().dropout, rng);
    let (loss, grads) = mlm_loss_and_grad(model, &masked, seeds.as_deref())?;
    check_finite(loss, &grads, "mlm")?;
    opt.step(&mut model.net.params, &grads);
    Ok(loss)
}

fn clm_targets(batch: &[TokenSeq]) -> (Vec<&[TokenId]>, Vec<Vec<Option<TokenId>>>) {
    batch
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| (&s[..s.len() - 1], s[1..].iter().map(|&t| Some(t)).collect()))
        .unzip()
}

/// Mean next-token cross-entropy over every predicted position and its
/// gradient. Sequences shorter than two tokens contribute nothing.
pub fn clm_loss_and_grad(model: &CausalModel, batch: &[TokenSeq], dropout_seeds: Option<&[u64]>) -> Result<(f64, Params)> {
    let (inputs, targets) = clm_targets(batch);
    let (loss, grads) = batch_loss(&model.net, &inputs, &targets, dropout_seeds, true)?;
    Ok((loss, grads.expect("gradient requested")))
}

pub fn clm_loss(model: &CausalModel, batch: &[TokenSeq]) -> Result<f64> {
    let (inputs, targets) = clm_targets(batch);
    Ok(batch_loss(&model.net, &inputs, &targets, None, false)?.0)
}

pub fn train_clm_step(model: &mut CausalModel, batch: &[TokenSeq], opt: &mut Adam, rng: &mut impl Rng) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let seeds = dropout_seeds(batch.len(), model.config().dropout, rng);
    let (loss, grads) = clm_loss_and_grad(model, batch, seeds.as_deref())?;
    check_finite(loss, &grads, "clm")?;
    opt.step(&mut model.net.params, &grads);
    Ok(loss)
}
