//! Masked multi-head attention and rotary-rotation kernels.

use crate::tensor::{matmul_nn, matmul_tn, transpose};
use crate::{Result, TensorError};

/// Additive attention bias over an `n × n` (query, key) grid.
///
/// Entries equal to `-inf` are treated as hard blocks: the corresponding key is
/// skipped entirely, so its value cannot influence the query's output even
/// through rounding.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    n: usize,
    bias: Vec<f64>,
}

impl AttnMask {
    pub fn full(n: usize) -> Self {
        AttnMask {
            n,
            bias: vec![0.0; n * n],
        }
    }

    pub fn from_allow(n: usize, allow: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut bias = vec![f64::NEG_INFINITY; n * n];
        for i in 0..n {
            for j in 0..n {
                if allow(i, j) {
                    bias[i * n + j] = 0.0;
                }
            }
        }
        AttnMask::additive(n, bias)
    }

    /// Every query row must allow at least one key; finite entries and `-inf`
    /// are the only accepted values.
    pub fn additive(n: usize, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != n * n {
            return Err(TensorError::ShapeMismatch {
                op: "attn_mask",
                lhs: vec![n, n],
                rhs: vec![bias.len()],
            });
        }
        for i in 0..n {
            let row = &bias[i * n..(i + 1) * n];
            if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(TensorError::NonFinite { op: "attn_mask" });
            }
            if row.iter().all(|v| *v == f64::NEG_INFINITY) {
                return Err(TensorError::InvalidArgument(format!(
                    "attention mask row {i} blocks every key"
                )));
            }
        }
        Ok(AttnMask { n, bias })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.bias[query * self.n + key] != f64::NEG_INFINITY
    }

    pub fn bias(&self, query: usize, key: usize) -> f64 {
        self.bias[query * self.n + key]
    }
}

/// Per-token rotation angles for consecutive feature pairs of one head.
///
/// `angles[t * pairs + p]` rotates features `(2p, 2p+1)` of every head of
/// token `t`. A token whose angles are all zero is left unrotated.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryAngles {
    n: usize,
    pairs: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RotaryAngles {
    pub fn new(n: usize, pairs: usize, angles: &[f64]) -> Result<Self> {
        if angles.len() != n * pairs {
            return Err(TensorError::ShapeMismatch {
                op: "rotary_angles",
                lhs: vec![n, pairs],
                rhs: vec![angles.len()],
            });
        }
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(TensorError::NonFinite { op: "rotary_angles" });
        }
        Ok(RotaryAngles {
            n,
            pairs,
            cos: angles.iter().map(|a| a.cos()).collect(),
            sin: angles.iter().map(|a| a.sin()).collect(),
        })
    }

    pub fn tokens(&self) -> usize {
        self.n
    }

    /// Number of rotated pairs per head, i.e. half the head dimension.
    pub fn pairs(&self) -> usize {
        self.pairs
    }
}

/// Rotates `x[n, heads·2·pairs]`. `inverse` applies the transpose rotation,
/// which is also the backward pass.
pub(crate) fn rotate(x: &[f64], cols: usize, rot: &RotaryAngles, inverse: bool) -> Vec<f64> {
    let head_dim = 2 * rot.pairs;
    let heads = cols / head_dim;
    let mut out = x.to_vec();
    let sign = if inverse { -1.0 } else { 1.0 };
    for t in 0..rot.n {
        for h in 0..heads {
            for p in 0..rot.pairs {
                let c = rot.cos[t * rot.pairs + p];
                let s = sign * rot.sin[t * rot.pairs + p];
                let base = t * cols + h * head_dim + 2 * p;
                let (x0, x1) = (x[base], x[base + 1]);
                out[base] = x0 * c - x1 * s;
                out[base + 1] = x0 * s + x1 * c;
            }
        }
    }
    out
}

/// Copies head `h` of a `[n, heads·dh]` matrix into a contiguous `[n, dh]` block.
fn head_slice(x: &[f64], n: usize, cols: usize, dh: usize, h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dh);
    for t in 0..n {
        out.extend_from_slice(&x[t * cols + h * dh..t * cols + (h + 1) * dh]);
    }
    out
}

/// `[n, dh]` block back into head `h` of a `[n, heads·dh]` matrix.
fn head_store(dst: &mut [f64], src: &[f64], n: usize, cols: usize, dh: usize, h: usize) {
    for t in 0..n {
        dst[t * cols + h * dh..t * cols + (h + 1) * dh].copy_from_slice(&src[t * dh..(t + 1) * dh]);
    }
}

/// Forward pass. Returns the output `[n, cols]` and the attention
/// probabilities `[heads, n, n]` needed for backward. Blocked entries get a
/// probability of exactly 0, so they add nothing to the value product.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    cols: usize,
    heads: usize,
    mask: &AttnMask,
) -> (Vec<f64>, Vec<f64>) {
    let dh = cols / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * cols];
    let mut probs = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        let qh = head_slice(q, n, cols, dh, h);
        let kt = transpose(&head_slice(k, n, cols, dh, h), n, dh);
        let vh = head_slice(v, n, cols, dh, h);
        let mut p = matmul_nn(&qh, &kt, n, dh, n);
        for (i, row) in p.chunks_exact_mut(n).enumerate() {
            let bias = &mask.bias[i * n..(i + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for (s, &b) in row.iter_mut().zip(bias) {
                *s = *s * scale + b;
                max = max.max(*s);
            }
            let mut denom = 0.0;
            for (s, &b) in row.iter_mut().zip(bias) {
                *s = if b == f64::NEG_INFINITY { 0.0 } else { (*s - max).exp() };
                denom += *s;
            }
            for s in row.iter_mut() {
                *s /= denom;
            }
        }
        head_store(&mut out, &matmul_nn(&p, &vh, n, n, dh), n, cols, dh, h);
        probs.extend_from_slice(&p);
    }
    (out, probs)
}

pub(crate) struct AttentionGrads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    n: usize,
    cols: usize,
    heads: usize,
) -> AttentionGrads {
    let dh = cols / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; n * cols];
    let mut dk = vec![0.0; n * cols];
    let mut dv = vec![0.0; n * cols];
    for h in 0..heads {
        let p = &probs[h * n * n..(h + 1) * n * n];
        let qh = head_slice(q, n, cols, dh, h);
        let kh = head_slice(k, n, cols, dh, h);
        let vt = transpose(&head_slice(v, n, cols, dh, h), n, dh);
        let doh = head_slice(dout, n, cols, dh, h);
        // dP = dO·Vᵀ ; dS = P ⊙ (dP − Σ_j P_ij dP_ij)
        let mut ds = matmul_nn(&doh, &vt, n, dh, n);
        for (prow, drow) in p.chunks_exact(n).zip(ds.chunks_exact_mut(n)) {
            let weighted: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
            for (d, &pp) in drow.iter_mut().zip(prow) {
                *d = if pp == 0.0 { 0.0 } else { pp * (*d - weighted) * scale };
            }
        }
        head_store(&mut dv, &matmul_tn(p, &doh, n, n, dh), n, cols, dh, h);
        head_store(&mut dq, &matmul_nn(&ds, &kh, n, n, dh), n, cols, dh, h);
        head_store(&mut dk, &matmul_tn(&ds, &qh, n, n, dh), n, cols, dh, h);
    }
    AttentionGrads { dq, dk, dv }
}
