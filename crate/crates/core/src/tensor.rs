//! Dense row-major `f64` tensors and the forward kernels used by the tape.
//!
//! Every kernel validates shapes and rejects non-finite results, so a NaN or
//! infinity never propagates silently through a forward pass.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Stabilizer added to the variance in [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Immutable dense tensor. Cloning is cheap: the buffer is shared.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        check_finite("tensor", &data)?;
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Kernel-internal constructor; callers guarantee the shape and finiteness.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(Vec::new(), vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; numel])
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar(self.shape.clone()))
        }
    }

    /// `(rows, cols)` of a matrix.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, format!("expected a matrix, got {other:?}"))),
        }
    }

    /// Length of the trailing axis.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Row `i` of the tensor viewed as `[numel / last_dim, last_dim]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.last_dim();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// Mutable access for in-place optimizer updates; copies if the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Slice of a 1-D tensor.
    pub fn slice1(&self, start: usize, end: usize) -> Result<Self> {
        if self.rank() != 1 || start >= end || end > self.numel() {
            return Err(Error::shape("slice", format!("[{start}:{end}] of {:?}", self.shape)));
        }
        Ok(Self::from_parts(vec![end - start], self.data[start..end].to_vec()))
    }

    pub fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Self> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        check_finite(op, &data)?;
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn zip_same(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    let data: Vec<f64> = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
    check_finite(op, &data)?;
    Ok(Tensor::from_parts(a.shape.clone(), data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("sub", a, b, |x, y| x - y)
}

/// Elementwise (Hadamard) product; shapes must be identical.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("hadamard", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, c: f64) -> Result<Tensor> {
    a.map("scale", |v| v * c)
}

pub fn relu(a: &Tensor) -> Result<Tensor> {
    a.map("relu", |v| v.max(0.0))
}

pub fn sigmoid(a: &Tensor) -> Result<Tensor> {
    a.map("sigmoid", sigmoid_scalar)
}

pub fn tanh(a: &Tensor) -> Result<Tensor> {
    a.map("tanh", f64::tanh)
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Rows of `a` processed together so each weight row is streamed once per block.
const ROW_BLOCK: usize = 8;

/// `c += a · b` for row-major `a: [m,k]`, `b: [k,n]`.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i0 in (0..m).step_by(ROW_BLOCK) {
        let i1 = (i0 + ROW_BLOCK).min(m);
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            for i in i0..i1 {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let c_row = &mut c[i * n..(i + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += aip * bv;
                }
            }
        }
    }
}

/// `c += a · bᵀ` for `a: [m,n]`, `b: [k,n]`, `c: [m,k]`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i0 in (0..m).step_by(ROW_BLOCK) {
        let i1 = (i0 + ROW_BLOCK).min(m);
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            for i in i0..i1 {
                let a_row = &a[i * n..(i + 1) * n];
                let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                c[i * k + p] += dot;
            }
        }
    }
}

/// `c += aᵀ · b` for `a: [m,k]`, `b: [m,n]`, `c: [k,n]`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i0 in (0..m).step_by(ROW_BLOCK) {
        let i1 = (i0 + ROW_BLOCK).min(m);
        for p in 0..k {
            let c_row = &mut c[p * n..(p + 1) * n];
            for i in i0..i1 {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let b_row = &b[i * n..(i + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += aip * bv;
                }
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(&a.data, &b.data, &mut out, m, k, n);
    check_finite("matmul", &out)?;
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2("transpose")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Visits every 1-D lane along `axis` as (offset, stride, len).
fn lanes(shape: &[usize], axis: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    (0..outer).flat_map(move |o| (0..inner).map(move |i| (o * len * inner + i, inner, len)))
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax(v: &Tensor, axis: usize) -> Result<Tensor> {
    if v.rank() == 0 {
        return Ok(Tensor::from_parts(Vec::new(), vec![1.0]));
    }
    if axis >= v.rank() {
        return Err(Error::shape("softmax", format!("axis {axis} of {:?}", v.shape)));
    }
    let mut out = v.data.to_vec();
    for (start, stride, len) in lanes(&v.shape, axis) {
        let idx = |t: usize| start + t * stride;
        let max = (0..len).map(|t| out[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for t in 0..len {
            let e = (out[idx(t)] - max).exp();
            out[idx(t)] = e;
            total += e;
        }
        for t in 0..len {
            out[idx(t)] /= total;
        }
    }
    check_finite("softmax", &out)?;
    Ok(Tensor::from_parts(v.shape.clone(), out))
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// `v - logsumexp(v)` along the last axis.
pub fn log_softmax(v: &Tensor) -> Result<Tensor> {
    let n = v.last_dim();
    let mut out = Vec::with_capacity(v.numel());
    for r in 0..v.rows() {
        let row = v.row(r);
        let lse = log_sum_exp(row);
        out.extend(row.iter().map(|&x| x - lse));
    }
    debug_assert_eq!(out.len() % n, 0);
    check_finite("log_softmax", &out)?;
    Ok(Tensor::from_parts(v.shape.clone(), out))
}

/// Normalized rows plus the per-row inverse standard deviation, before gain/bias.
pub(crate) fn normalize_rows(v: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = v.last_dim();
    let mut normed = Vec::with_capacity(v.numel());
    let mut inv_std = Vec::with_capacity(v.rows());
    for r in 0..v.rows() {
        let row = v.row(r);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        normed.extend(row.iter().map(|x| (x - mean) * inv));
        inv_std.push(inv);
    }
    (normed, inv_std)
}

/// Layer normalization over the last axis with learned gain and bias.
pub fn layer_norm(v: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = v.last_dim();
    if gain.numel() != n || bias.numel() != n {
        return Err(Error::shape(
            "layer_norm",
            format!("row width {n}, gain {:?}, bias {:?}", gain.shape, bias.shape),
        ));
    }
    let (mut out, _) = normalize_rows(v);
    for row in out.chunks_mut(n) {
        for ((x, g), b) in row.iter_mut().zip(gain.data.iter()).zip(bias.data.iter()) {
            *x = *x * g + b;
        }
    }
    check_finite("layer_norm", &out)?;
    Ok(Tensor::from_parts(v.shape.clone(), out))
}

/// Joins tensors along `axis`; all other dimensions must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::shape("concat", "no operands"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::shape("concat", format!("axis {axis} of rank {rank}")));
    }
    for p in parts {
        let agrees = p.rank() == rank
            && p.shape
                .iter()
                .zip(first.shape.iter())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !agrees {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?} along axis {axis}", p.shape, first.shape),
            ));
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let total_axis: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut out = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total_axis;
    Ok(Tensor::from_parts(shape, out))
}
