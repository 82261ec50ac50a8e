//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive in execution order. Leaves are either
//! parameters (tracked) or constants (untracked); [`Tape::stop_gradient`]
//! turns any value into a constant, which blocks all upstream gradient.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::mask::MaskMatrix;
use crate::tensor::{self, NormStats, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    AddRowBias(Var, Var),
    ScaleRows(Var, Var),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: NormStats,
    },
    Gelu(Var),
    Sigmoid(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    BroadcastRows(Var),
    PoolRows(Var, usize),
    EquivalenceGate {
        mem: Var,
        cur: Var,
        mem_weights: Vec<f64>,
        cur_weights: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        scale: f64,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Clone, Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

impl Default for Tape {
    fn default() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `var`; a zero tensor when `var` does not
    /// reach the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Process-unique identity; [`Var`]s are only meaningful on their own tape.
    pub fn id(&self) -> u64 {
        self.id
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

    pub fn is_tracked(&self, var: Var) -> bool {
        self.nodes[var.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value recorded by {op:?}");
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `SG(x)`: same value, no gradient flows back through it.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), t))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul_nt(self.value(a), self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(v, Op::MatMulNt(a, b), t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), t))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// `s · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, s: f64, shift: f64) -> Var {
        let v = if shift == 0.0 {
            self.value(a).scale(s)
        } else {
            self.value(a).map(|x| s * x + shift)
        };
        let t = self.tracked(&[a]);
        self.push(v, Op::Affine(a, s), t)
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = tensor::add_row_bias(self.value(x), self.value(bias))?;
        let t = self.tracked(&[x, bias]);
        Ok(self.push(v, Op::AddRowBias(x, bias), t))
    }

    /// Multiplies row `i` of `x[m×n]` by `factors[i]`, where `factors` is `m×1`.
    pub fn scale_rows(&mut self, x: Var, factors: Var) -> Result<Var> {
        let f = self.value(factors);
        if f.len() != self.value(x).rows() {
            return Err(Error::Shape {
                op: "scale_rows",
                left: self.value(x).shape().to_vec(),
                right: f.shape().to_vec(),
            });
        }
        let v = tensor::scale_rows(self.value(x), f.data())?;
        let t = self.tracked(&[x, factors]);
        Ok(self.push(v, Op::ScaleRows(x, factors), t))
    }

    pub fn masked_softmax(&mut self, x: Var, mask: &MaskMatrix) -> Result<Var> {
        self.masked_softmax_impl(x, mask, false)
    }

    /// Masked softmax where fully forbidden rows produce zeros instead of an
    /// error; used for the memory branch of gated attention.
    pub(crate) fn masked_softmax_impl(&mut self, x: Var, mask: &MaskMatrix, allow_empty: bool) -> Result<Var> {
        let v = tensor::masked_softmax_impl(self.value(x), mask, allow_empty)?;
        let t = self.tracked(&[x]);
        Ok(self.push(v, Op::MaskedSoftmax(x), t))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (v, stats) = tensor::layer_norm_with_stats(self.value(x), self.value(gain), self.value(bias), eps)?;
        let t = self.tracked(&[x, gain, bias]);
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, stats }, t))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(tensor::gelu);
        let t = self.tracked(&[x]);
        self.push(v, Op::Gelu(x), t)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(tensor::sigmoid);
        let t = self.tracked(&[x]);
        self.push(v, Op::Sigmoid(x), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat_rows(&vals)?;
        let t = self.tracked(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), t))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat_cols(&vals)?;
        let t = self.tracked(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), t))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        if start == 0 && len == self.value(x).rows() {
            return Ok(x);
        }
        let v = tensor::slice_rows(self.value(x), start, len)?;
        let t = self.tracked(&[x]);
        Ok(self.push(v, Op::SliceRows(x, start), t))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        if start == 0 && width == self.value(x).cols() {
            return Ok(x);
        }
        let v = tensor::slice_cols(self.value(x), start, width)?;
        let t = self.tracked(&[x]);
        Ok(self.push(v, Op::SliceCols(x, start), t))
    }

    /// Rows `indices[i]` of `table`, e.g. an embedding lookup.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (n, d) = tv.dims();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("gather index {bad} out of {n} rows")));
        }
        if indices.is_empty() {
            return Err(Error::invalid("gather of zero rows"));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(tv.row(i));
        }
        let v = Tensor::matrix(indices.len(), d, data);
        let t = self.tracked(&[table]);
        Ok(self.push(v, Op::GatherRows(table, indices.to_vec()), t))
    }

    /// Repeats a single row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != 1 {
            return Err(Error::invalid(format!("broadcast_rows expects one row, got {:?}", xv.shape())));
        }
        let mut data = Vec::with_capacity(rows * xv.len());
        for _ in 0..rows {
            data.extend_from_slice(xv.data());
        }
        let v = Tensor::matrix(rows, xv.len(), data);
        let t = self.tracked(&[x]);
        Ok(self.push(v, Op::BroadcastRows(x), t))
    }

    /// Averages consecutive groups of `ratio` rows; a trailing partial group
    /// is averaged over its actual size.
    pub fn pool_rows(&mut self, x: Var, ratio: usize) -> Result<Var> {
        if ratio == 0 {
            return Err(Error::invalid("pooling ratio must be positive"));
        }
        let v = pool_rows_value(self.value(x), ratio);
        let t = self.tracked(&[x]);
        Ok(self.push(v, Op::PoolRows(x, ratio), t))
    }

    /// Per-row share of attention mass that falls on the memory scores:
    /// `Σ exp(mem) / (Σ exp(mem) + Σ exp(cur))` over allowed entries, with a
    /// shared per-row maximum. Output is `rows×1`; rows with no allowed
    /// memory entry get exactly 0.
    pub fn equivalence_gate(
        &mut self,
        mem_scores: Var,
        cur_scores: Var,
        mem_mask: &MaskMatrix,
        cur_mask: &MaskMatrix,
    ) -> Result<Var> {
        let (g, mem_weights, cur_weights) =
            equivalence_gate_value(self.value(mem_scores), self.value(cur_scores), mem_mask, cur_mask)?;
        let t = self.tracked(&[mem_scores, cur_scores]);
        let rows = g.len();
        Ok(self.push(
            Tensor::matrix(rows, 1, g),
            Op::EquivalenceGate {
                mem: mem_scores,
                cur: cur_scores,
                mem_weights,
                cur_weights,
            },
            t,
        ))
    }

    /// `scale · Σ_i −log softmax(logits_i)[target_i]` over rows with a
    /// target. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], scale: f64) -> Result<Var> {
        let lv = self.value(logits);
        let (m, v) = lv.dims();
        if targets.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; m * v];
        let mut total = 0.0;
        for (i, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t >= v {
                return Err(Error::invalid(format!("target {t} outside vocabulary of {v}")));
            }
            let row = lv.row(i);
            let (lse, max) = log_sum_exp(row);
            total += lse - row[t];
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp() / (lse - max).exp();
            }
        }
        let tr = self.tracked(&[logits]);
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                scale,
                probs,
            },
            tr,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let t = self.tracked(&[x]);
        self.push(v, Op::Sum(x), t)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    /// Gradient of `loss` with respect to `wrt`; zero when unreachable.
    pub fn grad(&self, loss: Var, wrt: Var) -> Result<Tensor> {
        Ok(self.backward(loss)?.wrt(wrt))
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |var: Var, delta: Tensor| {
            if !self.nodes[var.0].tracked {
                return;
            }
            match &mut grads[var.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let tracked = |v: Var| self.nodes[v.0].tracked;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if tracked(*a) {
                    acc(*a, tensor::matmul_nt(g, val(*b))?.reshape(val(*a).shape().to_vec())?);
                }
                if tracked(*b) {
                    acc(*b, tensor::matmul_tn(val(*a), g)?.reshape(val(*b).shape().to_vec())?);
                }
            }
            Op::MatMulNt(a, b) => {
                if tracked(*a) {
                    acc(*a, tensor::matmul(g, val(*b))?.reshape(val(*a).shape().to_vec())?);
                }
                if tracked(*b) {
                    acc(*b, tensor::matmul_tn(g, val(*a))?.reshape(val(*b).shape().to_vec())?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    acc(*a, g.mul(val(*b))?);
                }
                if tracked(*b) {
                    acc(*b, g.mul(val(*a))?);
                }
            }
            Op::Affine(a, s) => acc(*a, g.scale(*s)),
            Op::AddRowBias(x, b) => {
                acc(*x, g.clone());
                if tracked(*b) {
                    acc(*b, col_sums(g).reshape(val(*b).shape().to_vec())?);
                }
            }
            Op::ScaleRows(x, f) => {
                let fv = val(*f);
                if tracked(*x) {
                    acc(*x, tensor::scale_rows(g, fv.data())?);
                }
                if tracked(*f) {
                    let xv = val(*x);
                    let (m, n) = xv.dims();
                    let mut df = vec![0.0; m];
                    for (i, d) in df.iter_mut().enumerate() {
                        *d = (0..n).map(|j| g.get(i, j) * xv.get(i, j)).sum();
                    }
                    acc(*f, Tensor::new(fv.shape().to_vec(), df)?);
                }
            }
            Op::MaskedSoftmax(x) => {
                let y = &node.value;
                let (m, n) = y.dims();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, Tensor::matrix(m, n, dx));
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let gv = val(*gain);
                let (m, d) = val(*x).dims();
                if tracked(*gain) {
                    let mut dg = vec![0.0; d];
                    for i in 0..m {
                        for j in 0..d {
                            dg[j] += g.get(i, j) * stats.normalized[i * d + j];
                        }
                    }
                    acc(*gain, Tensor::new(gv.shape().to_vec(), dg)?);
                }
                if tracked(*bias) {
                    acc(*bias, col_sums(g).reshape(val(*bias).shape().to_vec())?);
                }
                if tracked(*x) {
                    let mut dx = vec![0.0; m * d];
                    for i in 0..m {
                        let mut mean_dn = 0.0;
                        let mut mean_dn_n = 0.0;
                        for j in 0..d {
                            let dn = g.get(i, j) * gv.data()[j];
                            mean_dn += dn;
                            mean_dn_n += dn * stats.normalized[i * d + j];
                        }
                        mean_dn /= d as f64;
                        mean_dn_n /= d as f64;
                        for j in 0..d {
                            let dn = g.get(i, j) * gv.data()[j];
                            dx[i * d + j] = stats.rstd[i] * (dn - mean_dn - stats.normalized[i * d + j] * mean_dn_n);
                        }
                    }
                    acc(*x, Tensor::matrix(m, d, dx));
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                let dx: Vec<f64> = g.data().iter().zip(xv.data()).map(|(gi, &xi)| gi * tensor::gelu_grad(xi)).collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let dx: Vec<f64> = g.data().iter().zip(y.data()).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
                acc(*x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let r = val(p).rows();
                    if tracked(p) {
                        acc(p, tensor::slice_rows(g, start, r)?);
                    }
                    start += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if tracked(p) {
                        acc(p, tensor::slice_cols(g, start, c)?);
                    }
                    start += c;
                }
            }
            Op::SliceRows(x, start) => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(&[xv.rows(), xv.cols()]);
                let n = xv.cols();
                dx.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                acc(*x, dx.reshape(xv.shape().to_vec())?);
            }
            Op::SliceCols(x, start) => {
                let xv = val(*x);
                let (m, n) = xv.dims();
                let w = g.cols();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + w].copy_from_slice(g.row(i));
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::GatherRows(table, indices) => {
                let tv = val(*table);
                let d = tv.cols();
                let mut dt = vec![0.0; tv.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for (o, gi) in dt[i * d..(i + 1) * d].iter_mut().zip(g.row(r)) {
                        *o += gi;
                    }
                }
                acc(*table, Tensor::new(tv.shape().to_vec(), dt)?);
            }
            Op::BroadcastRows(x) => {
                acc(*x, col_sums(g).reshape(val(*x).shape().to_vec())?);
            }
            Op::PoolRows(x, ratio) => {
                let xv = val(*x);
                let (m, n) = xv.dims();
                let mut dx = vec![0.0; m * n];
                for (grp, start) in (0..m).step_by(*ratio).enumerate() {
                    let end = (start + ratio).min(m);
                    let count = (end - start) as f64;
                    for i in start..end {
                        for j in 0..n {
                            dx[i * n + j] = g.get(grp, j) / count;
                        }
                    }
                }
                acc(*x, Tensor::matrix(m, n, dx));
            }
            Op::EquivalenceGate {
                mem,
                cur,
                mem_weights,
                cur_weights,
            } => {
                let gate = &node.value;
                let (m, nm) = val(*mem).dims();
                let nc = val(*cur).cols();
                if tracked(*mem) {
                    let mut d = vec![0.0; m * nm];
                    for i in 0..m {
                        let f = g.data()[i] * (1.0 - gate.data()[i]);
                        for j in 0..nm {
                            d[i * nm + j] = f * mem_weights[i * nm + j];
                        }
                    }
                    acc(*mem, Tensor::matrix(m, nm, d));
                }
                if tracked(*cur) {
                    let mut d = vec![0.0; m * nc];
                    for i in 0..m {
                        let f = -g.data()[i] * gate.data()[i];
                        for j in 0..nc {
                            d[i * nc + j] = f * cur_weights[i * nc + j];
                        }
                    }
                    acc(*cur, Tensor::matrix(m, nc, d));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                scale,
                probs,
            } => {
                let lv = val(*logits);
                let (m, v) = lv.dims();
                let s = g.item() * scale;
                let mut d = vec![0.0; m * v];
                for (i, target) in targets.iter().enumerate() {
                    let Some(t) = *target else { continue };
                    for j in 0..v {
                        d[i * v + j] = s * probs[i * v + j];
                    }
                    d[i * v + t] -= s;
                }
                acc(*logits, Tensor::matrix(m, v, d));
            }
            Op::Sum(x) => {
                let xv = val(*x);
                acc(*x, Tensor::filled(xv.shape(), g.item()));
            }
        }
        Ok(())
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let (m, n) = g.dims();
    let mut out = vec![0.0; n];
    for i in 0..m {
        for (o, v) in out.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    Tensor::vector(out)
}

/// Returns `(log Σ exp(row), max(row))`.
pub(crate) fn log_sum_exp(row: &[f64]) -> (f64, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
    (max + sum.ln(), max)
}

pub(crate) fn pool_rows_value(x: &Tensor, ratio: usize) -> Tensor {
    let (m, n) = x.dims();
    let groups = m.div_ceil(ratio);
    let mut out = vec![0.0; groups * n];
    for (grp, start) in (0..m).step_by(ratio).enumerate() {
        let end = (start + ratio).min(m);
        let orow = &mut out[grp * n..(grp + 1) * n];
        for i in start..end {
            for (o, v) in orow.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        let count = (end - start) as f64;
        for o in orow.iter_mut() {
            *o /= count;
        }
    }
    Tensor::matrix(groups, n, out)
}

/// Gate values plus the normalised per-entry weights `exp(s − c) / Z`
/// needed by the backward pass.
pub(crate) fn equivalence_gate_value(
    mem: &Tensor,
    cur: &Tensor,
    mem_mask: &MaskMatrix,
    cur_mask: &MaskMatrix,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (m, nm) = mem.dims();
    let (m2, nc) = cur.dims();
    if m != m2 || mem_mask.shape() != [m, nm] || cur_mask.shape() != [m, nc] {
        return Err(Error::Shape {
            op: "equivalence_gate",
            left: vec![m, nm, m2, nc],
            right: vec![mem_mask.rows(), mem_mask.cols(), cur_mask.rows(), cur_mask.cols()],
        });
    }
    let mut gate = vec![0.0; m];
    let mut mw = vec![0.0; m * nm];
    let mut cw = vec![0.0; m * nc];
    for i in 0..m {
        let mut max = f64::NEG_INFINITY;
        for j in 0..nm {
            if mem_mask.is_allowed(i, j) {
                max = max.max(mem.get(i, j));
            }
        }
        for j in 0..nc {
            if cur_mask.is_allowed(i, j) {
                max = max.max(cur.get(i, j));
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::EmptyRow { row: i });
        }
        let mut mem_sum = 0.0;
        for j in 0..nm {
            if mem_mask.is_allowed(i, j) {
                let e = (mem.get(i, j) - max).exp();
                mw[i * nm + j] = e;
                mem_sum += e;
            }
        }
        let mut cur_sum = 0.0;
        for j in 0..nc {
            if cur_mask.is_allowed(i, j) {
                let e = (cur.get(i, j) - max).exp();
                cw[i * nc + j] = e;
                cur_sum += e;
            }
        }
        let z = mem_sum + cur_sum;
        gate[i] = mem_sum / z;
        for w in &mut mw[i * nm..(i + 1) * nm] {
            *w /= z;
        }
        for w in &mut cw[i * nc..(i + 1) * nc] {
            *w /= z;
        }
    }
    Ok((gate, mw, cw))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let loss = tape.sum(x);
        assert_eq!(tape.grad(loss, x).unwrap(), Tensor::filled(&[2, 3], 1.0));
    }

    #[test]
    fn stop_gradient_freezes_one_factor() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.5, -2.0, 4.0]));
        let frozen = tape.stop_gradient(x);
        let prod = tape.mul(frozen, x).unwrap();
        let loss = tape.sum(prod);
        // d/dx Σ SG(x)·x = SG(x), not 2x.
        assert_eq!(tape.grad(loss, x).unwrap(), Tensor::vector(vec![1.5, -2.0, 4.0]));
    }

    #[test]
    fn unreachable_gradient_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.param(Tensor::vector(vec![3.0]));
        let loss = tape.sum(y);
        assert_eq!(tape.grad(loss, x).unwrap(), Tensor::zeros(&[2]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn pooling_averages_partial_tail() {
        let x = Tensor::matrix(3, 1, vec![1.0, 3.0, 10.0]);
        assert_eq!(pool_rows_value(&x, 2).data(), &[2.0, 10.0]);
    }
}
