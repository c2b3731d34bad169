//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! Every op appends one node holding its output value. `backward` walks the
//! nodes in exact reverse order and accumulates gradients additively, so a
//! value used twice receives the sum of both contributions.

use std::rc::Rc;

use crate::attention::{self, AttnMask, RotaryAngles};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn};
use crate::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clip01(Var),
    Softmax(Var),
    RmsNorm { x: Var, inv_rms: Vec<f64> },
    Silu(Var),
    Mean(Var),
    L1(Var, Var),
    L2(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Rotary { x: Var, rot: Rc<RotaryAngles> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Gather { x: Var, idx: Rc<Vec<usize>> },
    MeanRows(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Single-owner record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn checked(op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op });
    }
    Ok(Tensor::from_parts(shape, data))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const RMS_EPS: f64 = 1e-6;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn dims2(&self, var: Var) -> (usize, usize) {
        let t = self.value(var);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k) = (ta.rows(), ta.cols());
        let n = tb.cols();
        let out = checked("matmul", vec![m, n], matmul_nn(ta.data(), tb.data(), m, k, n))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        checked(name, ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tr.numel() != n {
            return Err(mismatch(name, ta, tr));
        }
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|r| r.iter().zip(tr.data()).map(|(x, y)| f(*x, *y)))
            .collect();
        checked(name, ta.shape().to_vec(), data)
    }

    /// Adds a trailing-axis vector to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", a, row, |x, y| x + y)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Multiplies every row elementwise by a trailing-axis vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", a, row, |x, y| x * y)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c).map_err(|_| TensorError::NonFinite { op: "scale" })?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Scale(a, c), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self
            .value(a)
            .map(|x| x + c)
            .map_err(|_| TensorError::NonFinite { op: "add_scalar" })?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::AddScalar(a), rg))
    }

    /// Clamps to `[0, 1]`. The subgradient is 1 strictly inside and 0 elsewhere,
    /// boundaries included.
    pub fn clip01(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.clamp(0.0, 1.0))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Clip01(a), rg))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / sum));
        }
        let out = checked("softmax", t.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// `x / sqrt(mean(x²) + 1e-6)` per trailing-axis row, no learned weight.
    pub fn rms_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        let mut inv_rms = Vec::with_capacity(t.rows());
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks(n) {
            let ms = row.iter().map(|x| x * x).sum::<f64>() / n as f64;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(r);
            data.extend(row.iter().map(|x| x * r));
        }
        let out = checked("rms_norm", t.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::RmsNorm { x: a, inv_rms }, rg))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * sigmoid(x))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Silu(a), rg))
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let out = checked("mean", vec![1], vec![m])?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Mean(a), rg))
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("l1_loss", ta, tb));
        }
        let m = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y).abs()).sum::<f64>()
            / ta.numel() as f64;
        let out = checked("l1_loss", vec![1], vec![m])?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::L1(a, b), rg))
    }

    /// Mean squared difference.
    pub fn l2_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("l2_loss", ta, tb));
        }
        let m = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / ta.numel() as f64;
        let out = checked("l2_loss", vec![1], vec![m])?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::L2(a, b), rg))
    }

    /// Multi-head scaled-dot-product attention. `q`, `k`, `v` are `[n, heads·dh]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Rc<AttnMask>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() || tq.shape().len() != 2 {
            return Err(mismatch("attention", tq, tk));
        }
        let (n, cols) = (tq.rows(), tq.cols());
        if heads == 0 || cols % heads != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "{cols} features do not split into {heads} heads"
            )));
        }
        if mask.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: vec![n, n],
                rhs: vec![mask.len(), mask.len()],
            });
        }
        let (out, probs) =
            attention::attention_forward(tq.data(), tk.data(), tv.data(), n, cols, heads, &mask);
        let out = checked("attention", vec![n, cols], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Rotates consecutive even/odd feature pairs of every head by per-token angles.
    pub fn rotary(&mut self, x: Var, rot: Rc<RotaryAngles>) -> Result<Var> {
        let t = self.value(x);
        let (n, cols) = (t.rows(), t.cols());
        let head_dim = 2 * rot.pairs();
        if n != rot.tokens() || head_dim == 0 || cols % head_dim != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "rotary angles for {} tokens × {} pairs do not fit [{n}, {cols}]",
                rot.tokens(),
                rot.pairs()
            )));
        }
        let out = checked("rotary", t.shape().to_vec(), attention::rotate(t.data(), cols, &rot, false))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Rotary { x, rot }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(mismatch("concat_rows", self.value(parts[0]), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_parts(vec![rows, cols], data);
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(mismatch("concat_cols", self.value(parts[0]), t));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let c = t.cols();
                data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let out = Tensor::from_parts(vec![rows, total], data);
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x);
        if start + len > rows || len == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "row slice {start}..{} out of {rows}",
                start + len
            )));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::from_parts(vec![len, cols], data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x);
        if start + len > cols || len == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "column slice {start}..{} out of {cols}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::from_parts(vec![rows, len], data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// `out.flat[i] = x.flat[idx[i]]`, reshaped to `shape`. Indices may repeat.
    pub fn gather(&mut self, x: Var, idx: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if shape.iter().product::<usize>() != idx.len() {
            return Err(TensorError::InvalidArgument(format!(
                "gather of {} indices into shape {shape:?}",
                idx.len()
            )));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(TensorError::InvalidArgument(format!(
                "gather index {bad} out of {}",
                src.len()
            )));
        }
        let data = idx.iter().map(|&i| src[i]).collect();
        let out = Tensor::from_parts(shape.to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gather { x, idx }, rg))
    }

    /// Selects rows of a 2-D tensor (repeats allowed), e.g. embedding lookup
    /// or broadcasting a single row to many tokens.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let cols = self.value(x).cols();
        let idx: Vec<usize> = rows
            .iter()
            .flat_map(|&r| (r * cols..(r + 1) * cols).collect::<Vec<_>>())
            .collect();
        self.gather(x, Rc::new(idx), &[rows.len(), cols])
    }

    /// Mean over rows, producing `[1, cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x);
        let src = self.value(x).data();
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for (d, s) in data.iter_mut().zip(&src[r * cols..(r + 1) * cols]) {
                *d += s;
            }
        }
        for d in &mut data {
            *d /= rows as f64;
        }
        let out = checked("mean_rows", vec![1, cols], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MeanRows(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Back-propagates from a scalar `loss`. The tape can only be consumed once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, node.requires_grad) {
                (Some(g), true) => {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(TensorError::NonFinite { op: "backward" });
                    }
                    Ok(Some(Tensor::from_parts(node.value.shape().to_vec(), g)))
                }
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, contrib: Vec<f64>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Vec<f64>>],
        var: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        let n = self.nodes[var.0].value.numel();
        let slot = grads[var.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let val = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, matmul_nt(g, tb.data(), m, n, k));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, matmul_tn(ta.data(), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(tb).map(|(x, y)| x * y).collect());
                self.accumulate(grads, *b, g.iter().zip(ta).map(|(x, y)| x * y).collect());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.to_vec());
                let n = self.value(*row).numel();
                self.accumulate_with(grads, *row, |acc| {
                    for chunk in g.chunks(n) {
                        for (s, v) in acc.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                });
            }
            Op::MulRow(a, row) => {
                let ta = self.value(*a).data();
                let tr = self.value(*row).data();
                let n = tr.len();
                if self.requires_grad(*a) {
                    let da = g
                        .chunks(n)
                        .flat_map(|c| c.iter().zip(tr).map(|(x, y)| x * y))
                        .collect();
                    self.accumulate(grads, *a, da);
                }
                self.accumulate_with(grads, *row, |acc| {
                    for (gc, ac) in g.chunks(n).zip(ta.chunks(n)) {
                        for ((s, gv), av) in acc.iter_mut().zip(gc).zip(ac) {
                            *s += gv * av;
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.iter().map(|v| v * c).collect());
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Clip01(a) => {
                let x = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(gv, xv)| if *xv > 0.0 && *xv < 1.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(n).zip(val.chunks(n)) {
                    let dotv: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    d.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - dotv)));
                }
                self.accumulate(grads, *a, d);
            }
            Op::RmsNorm { x, inv_rms } => {
                let n = node.value.cols();
                let mut d = Vec::with_capacity(g.len());
                for ((gr, yr), r) in g.chunks(n).zip(val.chunks(n)).zip(inv_rms) {
                    let dotv: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    d.extend(gr.iter().zip(yr).map(|(gv, yv)| r * (gv - yv * dotv)));
                }
                self.accumulate(grads, *x, d);
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(gv, xv)| {
                        let s = sigmoid(*xv);
                        gv * s * (1.0 + xv * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::L1(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let n = ta.len() as f64;
                let d: Vec<f64> = ta
                    .iter()
                    .zip(tb)
                    .map(|(x, y)| {
                        let diff = x - y;
                        let s = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        g[0] * s / n
                    })
                    .collect();
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, d.iter().map(|v| -v).collect());
                }
                self.accumulate(grads, *a, d);
            }
            Op::L2(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let n = ta.len() as f64;
                let d: Vec<f64> = ta.iter().zip(tb).map(|(x, y)| g[0] * 2.0 * (x - y) / n).collect();
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, d.iter().map(|v| -v).collect());
                }
                self.accumulate(grads, *a, d);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let ag = attention::attention_backward(
                    tq.data(),
                    tk.data(),
                    tv.data(),
                    probs,
                    g,
                    tq.rows(),
                    tq.cols(),
                    *heads,
                );
                self.accumulate(grads, *q, ag.dq);
                self.accumulate(grads, *k, ag.dk);
                self.accumulate(grads, *v, ag.dv);
            }
            Op::Rotary { x, rot } => {
                let cols = node.value.cols();
                self.accumulate(grads, *x, attention::rotate(g, cols, rot, true));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    self.accumulate(grads, *p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if self.requires_grad(*p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + off..r * total + off + c]);
                        }
                        self.accumulate(grads, *p, d);
                    }
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = node.value.cols();
                let start = *start;
                self.accumulate_with(grads, *x, |acc| {
                    for (a, gv) in acc[start * cols..].iter_mut().zip(g) {
                        *a += gv;
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (rows, len) = (node.value.rows(), node.value.cols());
                let cols = self.value(*x).cols();
                let start = *start;
                self.accumulate_with(grads, *x, |acc| {
                    for r in 0..rows {
                        for c in 0..len {
                            acc[r * cols + start + c] += g[r * len + c];
                        }
                    }
                });
            }
            Op::Gather { x, idx } => {
                self.accumulate_with(grads, *x, |acc| {
                    for (gv, &i) in g.iter().zip(idx.iter()) {
                        acc[i] += gv;
                    }
                });
            }
            Op::MeanRows(x) => {
                let rows = self.value(*x).rows();
                let d: Vec<f64> = (0..rows).flat_map(|_| g.iter().map(|v| v / rows as f64)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
        }
        Ok(())
    }
}
