//! Dense row-major kernels.
//!
//! Every output element is accumulated in a fixed order that depends only on
//! its own row of the left operand, so computing a subset of rows yields
//! bit-identical values to computing all of them. Masked scoring and cached
//! decoding rely on this.

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[m×n] += aᵀ · b` with `a: [r×m]`, `b: [r×n]`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], r: usize, m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), r * m);
    debug_assert_eq!(b.len(), r * n);
    debug_assert_eq!(out.len(), m * n);
    for row in 0..r {
        let a_row = &a[row * m..(row + 1) * m];
        let b_row = &b[row * n..(row + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] = a[m×k] · bᵀ` with `b: [n×k]`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(b.len(), n * k);
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n, out);
}

/// Transposes an `[r×c]` matrix.
pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// `x[rows×d]·w[d×n] + bias`
pub fn linear(x: &[f64], rows: usize, w: &[f64], bias: &[f64], d: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    matmul(x, w, rows, d, n, &mut out);
    for row in out.chunks_exact_mut(n) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Column sums of an `[r×c]` matrix added into `out`.
pub fn col_sum_acc(a: &[f64], c: usize, out: &mut [f64]) {
    for row in a.chunks_exact(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Softmax restricted to entries whose `allowed` flag is set; the rest get
/// probability zero. Logits are divided by `temperature` first.
pub fn masked_softmax(logits: &[f64], allowed: impl Fn(usize) -> bool, temperature: f64) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for (i, &l) in logits.iter().enumerate() {
        if allowed(i) {
            max = max.max(l / temperature);
        }
    }
    let mut out = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for (i, &l) in logits.iter().enumerate() {
        if allowed(i) {
            let e = (l / temperature - max).exp();
            out[i] = e;
            sum += e;
        }
    }
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// `ln Σ exp(l_i)` over allowed entries.
pub fn log_sum_exp(logits: &[f64], allowed: impl Fn(usize) -> bool) -> f64 {
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .fold(f64::NEG_INFINITY, |m, (_, &l)| m.max(l));
    let sum: f64 = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &l)| (l - max).exp())
        .sum();
    max + sum.ln()
}
