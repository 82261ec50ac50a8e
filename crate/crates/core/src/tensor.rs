//! Dense row-major `f64` tensors and the numeric kernels shared by the plain
//! and the taped (differentiable) code paths.
//!
//! Every kernel sums in a fixed left-to-right order over the reduction index,
//! so identical inputs always produce identical bytes.

use crate::error::{Error, Result};
use crate::mask::MaskMatrix;

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) || shape.is_empty() {
            return Err(Error::invalid(format!("tensor shape {shape:?} must be non-empty and positive")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    /// Builds a 2-D tensor. Panics when `data.len() != rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix {rows}x{cols} from {} values", data.len());
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols == 0 {
            return Err(Error::invalid("from_rows needs at least one non-empty row"));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self::matrix(rows.len(), cols, data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row and column counts; a 1-D tensor is a single row.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape[..] {
            [n] => (1, n),
            [r, c] => (r, c),
            _ => (self.shape[0], self.data.len() / self.shape[0]),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(shape_err(op, self, other));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.dims();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, data)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    if k != k2 {
        return Err(shape_err("matmul", a, b));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

/// Sequential dot product.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `a[m×k] · b[n×k]ᵀ`. Each entry sums its `k` products in order, exactly
/// as [`dot`] would; the work runs through [`matmul`] on `bᵀ` so the inner
/// loop vectorizes.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, k) = a.dims();
    let (_, k2) = b.dims();
    if k != k2 {
        return Err(shape_err("matmul_nt", a, b));
    }
    matmul(a, &b.transpose())
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims();
    let (k2, n) = b.dims();
    if k != k2 {
        return Err(shape_err("matmul_tn", a, b));
    }
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

/// Row softmax of `scores + mask`, stabilised by the maximum over allowed
/// entries. Forbidden entries receive exactly zero weight.
pub fn masked_softmax(scores: &Tensor, mask: &MaskMatrix) -> Result<Tensor> {
    masked_softmax_impl(scores, mask, false)
}

/// Like [`masked_softmax`] but a fully forbidden row yields a zero row.
pub(crate) fn masked_softmax_impl(scores: &Tensor, mask: &MaskMatrix, allow_empty: bool) -> Result<Tensor> {
    let (m, n) = scores.dims();
    if mask.shape() != [m, n] {
        return Err(Error::Shape {
            op: "masked_softmax",
            left: scores.shape.clone(),
            right: mask.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let srow = scores.row(i);
        let allow = mask.row(i);
        let mut max = f64::NEG_INFINITY;
        for (&s, &a) in srow.iter().zip(allow) {
            if a && s > max {
                max = s;
            }
        }
        if max == f64::NEG_INFINITY {
            if allow_empty && !allow.iter().any(|&a| a) {
                continue;
            }
            return Err(Error::EmptyRow { row: i });
        }
        let orow = &mut out[i * n..(i + 1) * n];
        let mut sum = 0.0;
        for ((o, &s), &a) in orow.iter_mut().zip(srow).zip(allow) {
            if a {
                let e = (s - max).exp();
                *o = e;
                sum += e;
            }
        }
        for (o, &a) in orow.iter_mut().zip(allow) {
            if a {
                *o /= sum;
            }
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

/// Per-row statistics kept by the layer-norm kernel for its backward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormStats {
    pub normalized: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_with_stats(x, gain, bias, eps).map(|(t, _)| t)
}

pub(crate) fn layer_norm_with_stats(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<(Tensor, NormStats)> {
    let (m, d) = x.dims();
    if gain.len() != d {
        return Err(shape_err("layer_norm gain", x, gain));
    }
    if bias.len() != d {
        return Err(shape_err("layer_norm bias", x, bias));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("layer_norm eps must be positive, got {eps}")));
    }
    let mut out = vec![0.0; m * d];
    let mut normalized = vec![0.0; m * d];
    let mut rstd = vec![0.0; m];
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let n = (row[j] - mean) * r;
            normalized[i * d + j] = n;
            out[i * d + j] = n * gain.data[j] + bias.data[j];
        }
    }
    Ok((Tensor::matrix(m, d, out), NormStats { normalized, rstd }))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adds `bias[n]` to every row of `x[m×n]`.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims();
    if bias.len() != n {
        return Err(shape_err("add_row_bias", x, bias));
    }
    let mut data = x.data.clone();
    for i in 0..m {
        for (v, b) in data[i * n..(i + 1) * n].iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    Ok(Tensor::matrix(m, n, data))
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let cols = parts.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?.cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.cols() != cols {
            return Err(shape_err("concat_rows", parts[0], p));
        }
        rows += p.rows();
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor::matrix(rows, cols, data))
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let rows = parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?.rows();
    if let Some(p) = parts.iter().find(|p| p.rows() != rows) {
        return Err(shape_err("concat_cols", parts[0], p));
    }
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Ok(Tensor::matrix(rows, cols, data))
}

pub fn slice_rows(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (m, n) = x.dims();
    if len == 0 || start + len > m {
        return Err(Error::invalid(format!("slice_rows [{start}, {}) of {m} rows", start + len)));
    }
    Ok(Tensor::matrix(len, n, x.data[start * n..(start + len) * n].to_vec()))
}

pub fn slice_cols(x: &Tensor, start: usize, width: usize) -> Result<Tensor> {
    let (m, n) = x.dims();
    if width == 0 || start + width > n {
        return Err(Error::invalid(format!("slice_cols [{start}, {}) of {n} cols", start + width)));
    }
    let mut data = Vec::with_capacity(m * width);
    for i in 0..m {
        data.extend_from_slice(&x.row(i)[start..start + width]);
    }
    Ok(Tensor::matrix(m, width, data))
}

/// Multiplies row `i` of `x` by `factors[i]`.
pub fn scale_rows(x: &Tensor, factors: &[f64]) -> Result<Tensor> {
    let (m, n) = x.dims();
    if factors.len() != m {
        return Err(Error::Shape {
            op: "scale_rows",
            left: x.shape.clone(),
            right: vec![factors.len()],
        });
    }
    let mut data = x.data.clone();
    for (i, &f) in factors.iter().enumerate() {
        for v in &mut data[i * n..(i + 1) * n] {
            *v *= f;
        }
    }
    Ok(Tensor::matrix(m, n, data))
}
