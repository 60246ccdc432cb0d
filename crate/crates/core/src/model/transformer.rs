//! Pre-LayerNorm transformer with hand-written backward pass.
//!
//! The same helpers serve the full forward, the single-row forward used by
//! masked scoring, and the key/value-cached causal decoder, so all three agree
//! bit-for-bit on any row they share.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{LayerParams, ModelConfig, Params};
use crate::error::{Error, Result};
use crate::tensor::{col_sum_acc, dot, linear, matmul_nt, matmul_tn_acc};
use crate::text::TokenId;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    pub config: ModelConfig,
    pub params: Params,
    pub causal: bool,
}

/// Row-major `[rows × vocab]` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Clone, Debug)]
struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

#[derive(Clone, Debug)]
struct LayerCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    att: Vec<f64>,
    mask_attn: Option<Vec<f64>>,
    ln2: LnCache,
    m: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
    mask_ffn: Option<Vec<f64>>,
}

/// Intermediate activations of a training forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    ids: Vec<TokenId>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    z: Vec<f64>,
    pub logits: Logits,
}

/// Per-layer keys and values for incremental causal decoding.
#[derive(Clone, Debug)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn layer_norm(x: &[f64], d: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, LnCache) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = inv;
        for j in 0..d {
            let h = (xr[j] - mean) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = gamma[j] * h + beta[j];
        }
    }
    (out, LnCache { xhat, inv_std })
}

fn layer_norm_backward(dy: &[f64], cache: &LnCache, d: usize, gamma: &[f64], dgamma: &mut [f64], dbeta: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for (r, &inv) in cache.inv_std.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        for j in 0..d {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dot(&dxhat, xh) / d as f64;
        for j in 0..d {
            dx[r * d + j] = inv * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn dropout_mask(len: usize, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Vec<f64>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    Some((0..len).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect())
}

impl Transformer {
    pub fn new(config: ModelConfig, causal: bool, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, rng);
        Ok(Transformer { config, params, causal })
    }

    pub fn from_params(config: ModelConfig, params: Params, causal: bool) -> Result<Self> {
        config.validate()?;
        let want = Params::expected_layout(&config);
        let got: Vec<_> = params.named().into_iter().map(|(n, t)| (n, t.shape.clone())).collect();
        if want != got {
            return Err(Error::Architecture("parameter shapes do not match config".into()));
        }
        Ok(Transformer { config, params, causal })
    }

    pub fn check_input(&self, ids: &[TokenId]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Empty("sequence"));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::TooLong {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn embed(&self, ids: &[TokenId], pos0: usize) -> Vec<f64> {
        let d = self.config.d_model;
        let mut h = vec![0.0; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            let te = &self.params.tok_emb.data[id as usize * d..(id as usize + 1) * d];
            let pe = &self.params.pos_emb.data[(pos0 + r) * d..(pos0 + r + 1) * d];
            for j in 0..d {
                h[r * d + j] = te[j] + pe[j];
            }
        }
        h
    }

    /// Multi-head attention for query rows at absolute positions
    /// `pos0..pos0+R` over `tk` keys. Returns the concatenated head outputs
    /// and the `[R × H × tk]` attention probabilities.
    fn attention(&self, q: &[f64], pos0: usize, k: &[f64], v: &[f64], tk: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.config.d_model;
        let nh = self.config.n_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let slopes = self.config.distance_slopes();
        let rows = q.len() / d;
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; rows * nh * tk];
        let mut scores = vec![0.0; tk];
        for r in 0..rows {
            let limit = if self.causal { (pos0 + r + 1).min(tk) } else { tk };
            for h in 0..nh {
                let qh = &q[r * d + h * dh..r * d + (h + 1) * dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..limit {
                    let s = dot(qh, &k[j * d + h * dh..j * d + (h + 1) * dh]) * scale - slopes[h] * (pos0 + r).abs_diff(j) as f64;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for s in &mut scores[..limit] {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let p_row = &mut probs[(r * nh + h) * tk..(r * nh + h + 1) * tk];
                let o = &mut out[r * d + h * dh..r * d + (h + 1) * dh];
                for j in 0..limit {
                    let p = scores[j] / sum;
                    p_row[j] = p;
                    let vj = &v[j * d + h * dh..j * d + (h + 1) * dh];
                    for (oi, &vv) in o.iter_mut().zip(vj) {
                        *oi += p * vv;
                    }
                }
            }
        }
        (out, probs)
    }

    /// Attention output projection and MLP for a set of query rows whose
    /// LayerNorm input `a_rows` and residual input `h_rows` are given.
    #[allow(clippy::too_many_arguments)]
    fn layer_rows(
        &self,
        lp: &LayerParams,
        h_rows: &[f64],
        q: Vec<f64>,
        pos0: usize,
        k: &[f64],
        v: &[f64],
        tk: usize,
        mut drop: Option<&mut ChaCha8Rng>,
    ) -> (Vec<f64>, LayerTail) {
        let d = self.config.d_model;
        let f = self.config.ffn_dim;
        let rows = h_rows.len() / d;
        let (att, probs) = self.attention(&q, pos0, k, v, tk);
        let o = linear(&att, rows, &lp.wo.data, &lp.bo.data, d, d);
        let mask_attn = dropout_mask(rows * d, self.config.dropout, drop.as_deref_mut());
        let mut mid = h_rows.to_vec();
        match &mask_attn {
            Some(mk) => mid.iter_mut().zip(&o).zip(mk).for_each(|((x, o), m)| *x += o * m),
            None => mid.iter_mut().zip(&o).for_each(|(x, o)| *x += o),
        }
        let (m, ln2) = layer_norm(&mid, d, &lp.ln2_gamma.data, &lp.ln2_beta.data);
        let u = linear(&m, rows, &lp.w1.data, &lp.b1.data, d, f);
        let g: Vec<f64> = u.iter().map(|&x| gelu(x)).collect();
        let ff = linear(&g, rows, &lp.w2.data, &lp.b2.data, f, d);
        let mask_ffn = dropout_mask(rows * d, self.config.dropout, drop);
        let mut out = mid;
        match &mask_ffn {
            Some(mk) => out.iter_mut().zip(&ff).zip(mk).for_each(|((x, o), m)| *x += o * m),
            None => out.iter_mut().zip(&ff).for_each(|(x, o)| *x += o),
        }
        let tail = LayerTail {
            q,
            probs,
            att,
            mask_attn,
            ln2,
            m,
            u,
            g,
            mask_ffn,
        };
        (out, tail)
    }

    fn layer_full(&self, lp: &LayerParams, h: &[f64], drop: Option<&mut ChaCha8Rng>) -> (Vec<f64>, LayerCache) {
        let d = self.config.d_model;
        let t = h.len() / d;
        let (a, ln1) = layer_norm(h, d, &lp.ln1_gamma.data, &lp.ln1_beta.data);
        let k = linear(&a, t, &lp.wk.data, &lp.bk.data, d, d);
        let v = linear(&a, t, &lp.wv.data, &lp.bv.data, d, d);
        let q = linear(&a, t, &lp.wq.data, &lp.bq.data, d, d);
        let (out, tail) = self.layer_rows(lp, h, q, 0, &k, &v, t, drop);
        let cache = LayerCache {
            ln1,
            a,
            q: tail.q,
            k,
            v,
            probs: tail.probs,
            att: tail.att,
            mask_attn: tail.mask_attn,
            ln2: tail.ln2,
            m: tail.m,
            u: tail.u,
            g: tail.g,
            mask_ffn: tail.mask_ffn,
        };
        (out, cache)
    }

    fn head(&self, h: &[f64]) -> (Vec<f64>, LnCache, Vec<f64>) {
        let d = self.config.d_model;
        let rows = h.len() / d;
        let (z, lnf) = layer_norm(h, d, &self.params.lnf_gamma.data, &self.params.lnf_beta.data);
        let logits = linear(&z, rows, &self.params.head_w.data, &self.params.head_b.data, d, self.config.vocab_size);
        (z, lnf, logits)
    }

    /// Full forward pass keeping the activations needed by [`backward`].
    /// Dropout is active only when an rng is supplied.
    ///
    /// [`backward`]: Transformer::backward
    pub fn forward_train(&self, ids: &[TokenId], mut dropout_rng: Option<&mut ChaCha8Rng>) -> Result<ForwardCache> {
        self.check_input(ids)?;
        let mut h = self.embed(ids, 0);
        let mut layers = Vec::with_capacity(self.config.n_layers);
        for lp in &self.params.layers {
            let (out, cache) = self.layer_full(lp, &h, dropout_rng.as_deref_mut());
            layers.push(cache);
            h = out;
        }
        let (z, lnf, logits) = self.head(&h);
        Ok(ForwardCache {
            ids: ids.to_vec(),
            layers,
            lnf,
            z,
            logits: Logits {
                rows: ids.len(),
                cols: self.config.vocab_size,
                data: logits,
            },
        })
    }

    /// Deterministic evaluation-mode logits for every position.
    pub fn forward(&self, ids: &[TokenId]) -> Result<Logits> {
        Ok(self.forward_train(ids, None)?.logits)
    }

    /// Logits at a single position. Bit-identical to `forward(ids).row(row)`
    /// but skips the last layer's other query rows.
    pub fn logits_row(&self, ids: &[TokenId], row: usize) -> Result<Vec<f64>> {
        Ok(self.logits_range(ids, row..row + 1)?.data)
    }

    /// Logits for positions `rows`, bit-identical to the matching rows of
    /// [`forward`](Transformer::forward).
    pub fn logits_range(&self, ids: &[TokenId], rows: std::ops::Range<usize>) -> Result<Logits> {
        self.check_input(ids)?;
        if rows.start >= rows.end || rows.end > ids.len() {
            return Err(Error::BlockOutOfRange {
                start: rows.start,
                end: rows.end,
                len: ids.len(),
            });
        }
        let d = self.config.d_model;
        let t = ids.len();
        let mut h = self.embed(ids, 0);
        let n = self.params.layers.len();
        for lp in &self.params.layers[..n - 1] {
            h = self.layer_full(lp, &h, None).0;
        }
        let lp = &self.params.layers[n - 1];
        let (a, _) = layer_norm(&h, d, &lp.ln1_gamma.data, &lp.ln1_beta.data);
        let k = linear(&a, t, &lp.wk.data, &lp.bk.data, d, d);
        let v = linear(&a, t, &lp.wv.data, &lp.bv.data, d, d);
        let r = rows.len();
        let q = linear(&a[rows.start * d..rows.end * d], r, &lp.wq.data, &lp.bq.data, d, d);
        let (out, _) = self.layer_rows(lp, &h[rows.start * d..rows.end * d], q, rows.start, &k, &v, t, None);
        Ok(Logits {
            rows: r,
            cols: self.config.vocab_size,
            data: self.head(&out).2,
        })
    }

    /// Runs `ids` through the decoder after the cached positions and returns
    /// the logits of the last new position. Causal models only.
    pub fn extend(&self, cache: &mut KvCache, ids: &[TokenId]) -> Result<Vec<f64>> {
        if !self.causal {
            return Err(Error::Unsupported("key/value caching requires a causal model".into()));
        }
        if ids.is_empty() {
            return Err(Error::Empty("sequence"));
        }
        let total = cache.len + ids.len();
        if total > self.config.max_len {
            return Err(Error::TooLong {
                len: total,
                max: self.config.max_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                size: self.config.vocab_size,
            });
        }
        let d = self.config.d_model;
        let r = ids.len();
        let pos0 = cache.len;
        let mut h = self.embed(ids, pos0);
        for (l, lp) in self.params.layers.iter().enumerate() {
            let (a, _) = layer_norm(&h, d, &lp.ln1_gamma.data, &lp.ln1_beta.data);
            cache.keys[l].extend(linear(&a, r, &lp.wk.data, &lp.bk.data, d, d));
            cache.values[l].extend(linear(&a, r, &lp.wv.data, &lp.bv.data, d, d));
            let q = linear(&a, r, &lp.wq.data, &lp.bq.data, d, d);
            h = self.layer_rows(lp, &h, q, pos0, &cache.keys[l], &cache.values[l], total, None).0;
        }
        cache.len = total;
        Ok(self.head(&h[(r - 1) * d..]).2)
    }

    pub fn empty_cache(&self) -> KvCache {
        let n = self.config.n_layers;
        KvCache {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    /// Gradient of a scalar loss with respect to all parameters, given the
    /// loss gradient with respect to the logits of `cache`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64]) -> Params {
        let cfg = &self.config;
        let (d, f, vsz) = (cfg.d_model, cfg.ffn_dim, cfg.vocab_size);
        let t = cache.ids.len();
        let p = &self.params;
        let mut g = Params::zeros(cfg);

        matmul_tn_acc(&cache.z, dlogits, t, d, vsz, &mut g.head_w.data);
        col_sum_acc(dlogits, vsz, &mut g.head_b.data);
        let mut dz = vec![0.0; t * d];
        matmul_nt(dlogits, &p.head_w.data, t, vsz, d, &mut dz);
        let mut dh = layer_norm_backward(&dz, &cache.lnf, d, &p.lnf_gamma.data, &mut g.lnf_gamma.data, &mut g.lnf_beta.data);

        for (l, lc) in cache.layers.iter().enumerate().rev() {
            let lp = &p.layers[l];
            let gl = &mut g.layers[l];

            // MLP branch
            let df = apply_mask(&dh, &lc.mask_ffn);
            matmul_tn_acc(&lc.g, &df, t, f, d, &mut gl.w2.data);
            col_sum_acc(&df, d, &mut gl.b2.data);
            let mut dg = vec![0.0; t * f];
            matmul_nt(&df, &lp.w2.data, t, d, f, &mut dg);
            let du: Vec<f64> = dg.iter().zip(&lc.u).map(|(g, &u)| g * gelu_grad(u)).collect();
            matmul_tn_acc(&lc.m, &du, t, d, f, &mut gl.w1.data);
            col_sum_acc(&du, f, &mut gl.b1.data);
            let mut dm = vec![0.0; t * d];
            matmul_nt(&du, &lp.w1.data, t, f, d, &mut dm);
            let dmid_ln = layer_norm_backward(&dm, &lc.ln2, d, &lp.ln2_gamma.data, &mut gl.ln2_gamma.data, &mut gl.ln2_beta.data);
            let dmid: Vec<f64> = dh.iter().zip(&dmid_ln).map(|(a, b)| a + b).collect();

            // attention branch
            let d_o = apply_mask(&dmid, &lc.mask_attn);
            matmul_tn_acc(&lc.att, &d_o, t, d, d, &mut gl.wo.data);
            col_sum_acc(&d_o, d, &mut gl.bo.data);
            let mut datt = vec![0.0; t * d];
            matmul_nt(&d_o, &lp.wo.data, t, d, d, &mut datt);
            let (dq, dk, dv) = self.attention_backward(&datt, lc, t);
            let mut da = vec![0.0; t * d];
            let mut tmp = vec![0.0; t * d];
            let projections = [
                (&dq, &lp.wq, &mut gl.wq, &mut gl.bq),
                (&dk, &lp.wk, &mut gl.wk, &mut gl.bk),
                (&dv, &lp.wv, &mut gl.wv, &mut gl.bv),
            ];
            for (dx, w, gw, gb) in projections {
                matmul_tn_acc(&lc.a, dx, t, d, d, &mut gw.data);
                col_sum_acc(dx, d, &mut gb.data);
                matmul_nt(dx, &w.data, t, d, d, &mut tmp);
                da.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
            }
            let dx_ln = layer_norm_backward(&da, &lc.ln1, d, &lp.ln1_gamma.data, &mut gl.ln1_gamma.data, &mut gl.ln1_beta.data);
            dh = dmid.iter().zip(&dx_ln).map(|(a, b)| a + b).collect();
        }

        for (r, &id) in cache.ids.iter().enumerate() {
            let row = &dh[r * d..(r + 1) * d];
            let te = &mut g.tok_emb.data[id as usize * d..(id as usize + 1) * d];
            te.iter_mut().zip(row).for_each(|(x, y)| *x += y);
            let pe = &mut g.pos_emb.data[r * d..(r + 1) * d];
            pe.iter_mut().zip(row).for_each(|(x, y)| *x += y);
        }
        g
    }

    fn attention_backward(&self, datt: &[f64], lc: &LayerCache, t: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.config.d_model;
        let nh = self.config.n_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut dp = vec![0.0; t];
        for i in 0..t {
            let limit = if self.causal { i + 1 } else { t };
            for h in 0..nh {
                let cols = h * dh..(h + 1) * dh;
                let d_o = &datt[i * d + cols.start..i * d + cols.end];
                let p_row = &lc.probs[(i * nh + h) * t..(i * nh + h + 1) * t];
                let mut s = 0.0;
                for j in 0..limit {
                    dp[j] = dot(d_o, &lc.v[j * d + cols.start..j * d + cols.end]);
                    s += p_row[j] * dp[j];
                    let dvj = &mut dv[j * d + cols.start..j * d + cols.end];
                    dvj.iter_mut().zip(d_o).for_each(|(x, y)| *x += p_row[j] * y);
                }
                for j in 0..limit {
                    let ds = p_row[j] * (dp[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in cols.clone() {
                        dq[i * d + c] += ds * lc.k[j * d + c];
                        dk[j * d + c] += ds * lc.q[i * d + c];
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

struct LayerTail {
    q: Vec<f64>,
    probs: Vec<f64>,
    att: Vec<f64>,
    mask_attn: Option<Vec<f64>>,
    ln2: LnCache,
    m: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
    mask_ffn: Option<Vec<f64>>,
}

fn apply_mask(x: &[f64], mask: &Option<Vec<f64>>) -> Vec<f64> {
    match mask {
        Some(m) => x.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => x.to_vec(),
    }
}
