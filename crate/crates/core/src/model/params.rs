use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Subtract `slope_h · |i − j|` from the attention score of query `i` and
    /// key `j`, with head slopes `2^(−8(h+1)/H)`.
    #[serde(default)]
    pub distance_bias: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: d_model 64, 2 layers, 4 heads, max_len 256.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 256,
            max_len: 256,
            dropout: 0.0,
            distance_bias: true,
        }
    }

    /// Per-head distance penalty slopes (all zero when the bias is off).
    pub fn distance_slopes(&self) -> Vec<f64> {
        let h = self.n_heads as f64;
        (0..self.n_heads)
            .map(|i| {
                if self.distance_bias {
                    2f64.powf(-8.0 * (i as f64 + 1.0) / h)
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// A named dense tensor. Matrices are row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| dist.sample(rng)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const LAYER_NAMES: [&str; 16] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.wq",
    "attn.bq",
    "attn.wk",
    "attn.bk",
    "attn.wv",
    "attn.bv",
    "attn.wo",
    "attn.bo",
    "ln2.gamma",
    "ln2.beta",
    "mlp.w1",
    "mlp.b1",
    "mlp.w2",
    "mlp.b2",
];

impl LayerParams {
    fn build(cfg: &ModelConfig, mut mat: impl FnMut(&[usize]) -> Tensor) -> Self {
        let (d, f) = (cfg.d_model, cfg.ffn_dim);
        LayerParams {
            ln1_gamma: Tensor::filled(&[d], 1.0),
            ln1_beta: Tensor::zeros(&[d]),
            wq: mat(&[d, d]),
            bq: Tensor::zeros(&[d]),
            wk: mat(&[d, d]),
            bk: Tensor::zeros(&[d]),
            wv: mat(&[d, d]),
            bv: Tensor::zeros(&[d]),
            wo: mat(&[d, d]),
            bo: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::filled(&[d], 1.0),
            ln2_beta: Tensor::zeros(&[d]),
            w1: mat(&[d, f]),
            b1: Tensor::zeros(&[f]),
            w2: mat(&[f, d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// All trainable tensors of a transformer. Gradients and optimizer moments
/// use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_gamma: Tensor,
    pub lnf_beta: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl Params {
    fn build(cfg: &ModelConfig, mut mat: impl FnMut(&[usize]) -> Tensor) -> Self {
        let (v, d) = (cfg.vocab_size, cfg.d_model);
        Params {
            tok_emb: mat(&[v, d]),
            pos_emb: mat(&[cfg.max_len, d]),
            layers: (0..cfg.n_layers).map(|_| LayerParams::build(cfg, &mut mat)).collect(),
            lnf_gamma: Tensor::filled(&[d], 1.0),
            lnf_beta: Tensor::zeros(&[d]),
            head_w: mat(&[d, v]),
            head_b: Tensor::zeros(&[v]),
        }
    }

    /// Normal(0, 0.02) weights, unit LayerNorm gains, zero biases; every value
    /// is rounded to f32 precision.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut p = Params::build(cfg, |shape| Tensor::normal(shape, 0.02, rng));
        p.round_to_f32();
        p
    }

    /// Same layout, all zeros (LayerNorm gains included).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }

    /// Tensors in manifest order with their names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("tok_emb".to_owned(), &self.tok_emb), ("pos_emb".to_owned(), &self.pos_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_NAMES.iter().zip(l.tensors()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("lnf.gamma".to_owned(), &self.lnf_gamma));
        out.push(("lnf.beta".to_owned(), &self.lnf_beta));
        out.push(("head.w".to_owned(), &self.head_w));
        out.push(("head.b".to_owned(), &self.head_b));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend([&mut self.lnf_gamma, &mut self.lnf_beta, &mut self.head_w, &mut self.head_b]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0))
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, f: f64) {
        for t in self.tensors_mut() {
            for x in &mut t.data {
                *x *= f;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Rounds every value to the nearest f32 so checkpoints are lossless.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for x in &mut t.data {
                *x = *x as f32 as f64;
            }
        }
    }

    /// Flat view of the `index`-th scalar across all tensors, for
    /// finite-difference checks.
    pub fn scalar_mut(&mut self, mut index: usize) -> &mut f64 {
        for t in self.tensors_mut() {
            if index < t.len() {
                return &mut t.data[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn scalar(&self, mut index: usize) -> f64 {
        for t in self.tensors() {
            if index < t.len() {
                return t.data[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    /// Sum of a list of gradients, added in list order.
    pub fn sum_in_order(mut grads: Vec<Params>) -> Option<Params> {
        let mut iter = grads.drain(..);
        let mut acc = iter.next()?;
        for g in iter {
            acc.add_assign(&g);
        }
        Some(acc)
    }

    pub(crate) fn expected_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        Params::build(cfg, Tensor::zeros)
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape.clone()))
            .collect()
    }

    pub(crate) fn zeros(cfg: &ModelConfig) -> Self {
        let mut p = Params::build(cfg, Tensor::zeros);
        for t in p.tensors_mut() {
            t.data.fill(0.0);
        }
        p
    }
}
