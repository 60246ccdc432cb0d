//! Logistic-regression discriminator over token-frequency features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{disc_score, Discriminator};
use crate::text::TokenSeq;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscTrainConfig {
    /// Full-batch gradient steps.
    pub steps: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for DiscTrainConfig {
    fn default() -> Self {
        DiscTrainConfig {
            steps: 500,
            lr: 20.0,
            l2: 1e-4,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Mean logistic loss of `disc` with `positive` labelled 1 and `negative` 0.
pub fn disc_loss(disc: &Discriminator, positive: &[TokenSeq], negative: &[TokenSeq]) -> f64 {
    let n = (positive.len() + negative.len()) as f64;
    let pos: f64 = positive.iter().map(|s| softplus(-disc_score(disc, s))).sum();
    let neg: f64 = negative.iter().map(|s| softplus(disc_score(disc, s))).sum();
    (pos + neg) / n
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

/// Gradient descent on the mean logistic loss plus `l2/2 · |w|²`, starting
/// from `init` (whose feature mask is kept).
pub fn train_discriminator(init: Discriminator, positive: &[TokenSeq], negative: &[TokenSeq], cfg: &DiscTrainConfig) -> Result<Discriminator> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::NoSamples);
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) || cfg.l2.is_nan() || cfg.l2 < 0.0 {
        return Err(Error::Config(format!("invalid discriminator lr {} / l2 {}", cfg.lr, cfg.l2)));
    }
    let mut disc = init;
    let data: Vec<(Vec<f64>, f64)> = positive
        .iter()
        .map(|s| (disc.features(s), 1.0))
        .chain(negative.iter().map(|s| (disc.features(s), 0.0)))
        .collect();
    let n = data.len() as f64;
    for _ in 0..cfg.steps {
        let mut gw = vec![0.0; disc.weights.len()];
        let mut gb = 0.0;
        for (f, y) in &data {
            let z = disc.bias + f.iter().zip(&disc.weights).map(|(a, b)| a * b).sum::<f64>();
            let r = (sigmoid(z) - y) / n;
            gb += r;
            for (g, x) in gw.iter_mut().zip(f) {
                *g += r * x;
            }
        }
        for ((w, g), on) in disc.weights.iter_mut().zip(&gw).zip(&disc.feature_mask) {
            if *on {
                *w -= cfg.lr * (g + cfg.l2 * *w);
            }
        }
        disc.bias -= cfg.lr * gb;
    }
    Ok(disc)
}
