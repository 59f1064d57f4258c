//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive application of one forward pass as a
//! node holding its value and its inputs. [`Tape::backward`] walks the nodes
//! in reverse, accumulating adjoints, and returns the adjoints of parameter
//! leaves as [`Gradients`]. A tape can be differentiated exactly once.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[m,n] + [n]` broadcast over rows.
    AddRow(Var, Var),
    /// `[m,n] * [m,1]` broadcast over columns.
    ScaleRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Pick(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant)
    }

    /// Records a parameter leaf; its adjoint is reported under `name`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.get(name)?.clone();
        self.push(value, Op::Param(name.to_owned()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::add(self.value(a), self.value(b))?;
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::sub(self.value(a), self.value(b))?;
        self.push(value, Op::Sub(a, b))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::hadamard(self.value(a), self.value(b))?;
        self.push(value, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `[m,n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("add_row")?;
        let b = self.value(row);
        if b.numel() != n {
            return Err(Error::shape("add_row", format!("[{m},{n}] + {:?}", b.shape())));
        }
        let mut out = self.value(a).data().to_vec();
        for r in out.chunks_mut(n) {
            r.iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
        let value = Tensor::new(vec![m, n], out).map_err(|_| Error::NonFinite { op: "add_row" })?;
        self.push(value, Op::AddRow(a, row))
    }

    /// Multiplies row `i` of `[m,n]` by `s[i]` where `s` has `m` elements.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("scale_rows")?;
        let sv = self.value(s);
        if sv.numel() != m {
            return Err(Error::shape("scale_rows", format!("[{m},{n}] * {:?}", sv.shape())));
        }
        let mut out = self.value(a).data().to_vec();
        for (r, &k) in out.chunks_mut(n).zip(sv.data()) {
            r.iter_mut().for_each(|x| *x *= k);
        }
        let value = Tensor::new(vec![m, n], out).map_err(|_| Error::NonFinite { op: "scale_rows" })?;
        self.push(value, Op::ScaleRows(a, s))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = tensor::scale(self.value(a), c)?;
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map("add_scalar", |v| v + c)?;
        self.push(value, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = tensor::relu(self.value(a))?;
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = tensor::sigmoid(self.value(a))?;
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = tensor::tanh(self.value(a))?;
        self.push(value, Op::Tanh(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let value = tensor::softmax(v, v.rank().saturating_sub(1))?;
        self.push(value, Op::Softmax(a))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let value = tensor::log_softmax(self.value(a))?;
        self.push(value, Op::LogSoftmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let value = tensor::layer_norm(self.value(x), self.value(gain), self.value(bias))?;
        let (normed, inv_std) = tensor::normalize_rows(self.value(x));
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = tensor::concat(&values, axis)?;
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = tensor::transpose(self.value(a))?;
        self.push(value, Op::Transpose(a))
    }

    /// Selects (and possibly repeats or reorders) rows of a matrix.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let (m, n) = src.dims2("gather_rows")?;
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(Error::shape("gather_rows", format!("rows {rows:?} of [{m},{n}]")));
        }
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(src.row(r));
        }
        let value = Tensor::from_parts(vec![rows.len(), n], out);
        self.push(value, Op::GatherRows(a, rows.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        self.push(value, Op::Reshape(a))
    }

    /// Picks `a[i, idx[i]]` from each row, giving a vector of length `m`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let n = src.last_dim();
        if idx.len() != src.rows() || idx.iter().any(|&j| j >= n) {
            return Err(Error::shape(
                "pick",
                format!("{} indices into {:?}", idx.len(), src.shape()),
            ));
        }
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| src.row(i)[j]).collect();
        let value = Tensor::from_parts(vec![out.len()], out);
        self.push(value, Op::Pick(a, idx.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s)?, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s)?, Op::Mean(a))
    }

    /// Propagates adjoints from the scalar `loss` back to every parameter leaf.
    ///
    /// Parameters that `loss` does not depend on are absent from the result.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        self.consumed = true;

        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        let mut grads = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            let nodes = &self.nodes;
            let val = |v: Var| nodes[v.0].value.data();
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => grads.add(name, g),
                Op::MatMul(a, b) => {
                    let (m, k) = nodes[a.0].value.dims2("matmul")?;
                    let (_, n) = nodes[b.0].value.dims2("matmul")?;
                    let mut da = vec![0.0; m * k];
                    tensor::gemm_nt_acc(&g, val(*b), &mut da, m, n, k);
                    accumulate(&mut adj, *a, da);
                    let mut db = vec![0.0; k * n];
                    tensor::gemm_tn_acc(val(*a), &g, &mut db, m, k, n);
                    accumulate(&mut adj, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.iter().map(|x| -x).collect());
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.iter().zip(val(*b)).map(|(x, y)| x * y).collect();
                    let db = g.iter().zip(val(*a)).map(|(x, y)| x * y).collect();
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::AddRow(a, row) => {
                    let n = nodes[row.0].value.numel();
                    let mut drow = vec![0.0; n];
                    for r in g.chunks(n) {
                        drow.iter_mut().zip(r).for_each(|(d, x)| *d += x);
                    }
                    accumulate(&mut adj, *row, drow);
                    accumulate(&mut adj, *a, g);
                }
                Op::ScaleRows(a, s) => {
                    let sv = val(*s);
                    let n = g.len() / sv.len();
                    let av = val(*a);
                    let mut da = Vec::with_capacity(g.len());
                    let mut ds = vec![0.0; sv.len()];
                    for (i, (gr, ar)) in g.chunks(n).zip(av.chunks(n)).enumerate() {
                        da.extend(gr.iter().map(|x| x * sv[i]));
                        ds[i] = gr.iter().zip(ar).map(|(x, y)| x * y).sum();
                    }
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *s, ds);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut adj, *a, g.iter().map(|x| x * c).collect());
                }
                Op::AddScalar(a) | Op::Reshape(a) => accumulate(&mut adj, *a, g),
                Op::Relu(a) => {
                    let d = g
                        .iter()
                        .zip(val(*a))
                        .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *a, d);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let d = g.iter().zip(y).map(|(x, &s)| x * s * (1.0 - s)).collect();
                    accumulate(&mut adj, *a, d);
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let d = g.iter().zip(y).map(|(x, &t)| x * (1.0 - t * t)).collect();
                    accumulate(&mut adj, *a, d);
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let n = node.value.last_dim();
                    let mut d = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(n).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, p)| x * p).sum();
                        d.extend(gr.iter().zip(yr).map(|(x, p)| p * (x - dot)));
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::LogSoftmax(a) => {
                    let y = node.value.data();
                    let n = node.value.last_dim();
                    let mut d = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(n).zip(y.chunks(n)) {
                        let total: f64 = gr.iter().sum();
                        d.extend(gr.iter().zip(yr).map(|(x, l)| x - l.exp() * total));
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    let gv = val(*gain);
                    let n = gv.len();
                    let mut dgain = vec![0.0; n];
                    let mut dbias = vec![0.0; n];
                    let mut dx = Vec::with_capacity(g.len());
                    for ((gr, xr), &inv) in g.chunks(n).zip(normed.chunks(n)).zip(inv_std) {
                        let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dgain[j] += gr[j] * xr[j];
                            dbias[j] += gr[j];
                            dx.push(inv / n as f64 * (n as f64 * dxhat[j] - sum_d - xr[j] * sum_dx));
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                    accumulate(&mut adj, *gain, dgain);
                    accumulate(&mut adj, *bias, dbias);
                }
                Op::Concat { parts, axis } => {
                    let shape = node.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let total = shape[*axis] * inner;
                    let mut offset = 0;
                    for p in parts {
                        let chunk = nodes[p.0].value.shape()[*axis] * inner;
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let start = o * total + offset;
                            d.extend_from_slice(&g[start..start + chunk]);
                        }
                        offset += chunk;
                        accumulate(&mut adj, *p, d);
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = nodes[a.0].value.dims2("transpose")?;
                    let mut d = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] = g[j * m + i];
                        }
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::GatherRows(a, rows) => {
                    let src = &nodes[a.0].value;
                    let n = src.last_dim();
                    let mut d = vec![0.0; src.numel()];
                    for (gr, &r) in g.chunks(n).zip(rows) {
                        d[r * n..(r + 1) * n].iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::Pick(a, idx) => {
                    let src = &nodes[a.0].value;
                    let n = src.last_dim();
                    let mut d = vec![0.0; src.numel()];
                    for (i, &j) in idx.iter().enumerate() {
                        d[i * n + j] += g[i];
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::Sum(a) => {
                    let n = nodes[a.0].value.numel();
                    accumulate(&mut adj, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = nodes[a.0].value.numel();
                    accumulate(&mut adj, *a, vec![g[0] / n as f64; n]);
                }
            }
        }
        if grads.0.values().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "backward" });
        }
        Ok(grads)
    }

    /// Backward pass that overwrites the gradient slots of `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        store.assign_grads(&grads)
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}
