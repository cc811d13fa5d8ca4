//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its output value and the recipe
//! for routing an upstream gradient back to its inputs. Nodes are only ever
//! appended after their inputs, so the tape is topologically ordered and a
//! single reverse sweep visits each node once.
//!
//! A tape reads parameters from exactly one [`ParamStore`]; parameter nodes
//! are cached per [`ParamId`] so repeated uses share one gradient slot.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, sigmoid, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sparse matrix in compressed-row form, used as a constant left operand.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, weight)` entries; duplicate coordinates are summed.
    pub fn from_entries(n_rows: usize, n_cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0; n_rows + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut weights: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, w) in entries {
            if last == Some((r, c)) {
                *weights.last_mut().expect("entry present") += w;
                continue;
            }
            last = Some((r, c));
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            weights.push(w);
        }
        for r in 0..n_rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            weights,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(self.n_rows, self.n_cols);
        for r in 0..self.n_rows {
            for (c, w) in self.row(r) {
                t.set(r, c, t.get(r, c) + w);
            }
        }
        t
    }

    fn mul_dense(&self, x: &Tensor, out: &mut Tensor) {
        let d = x.cols();
        for r in 0..self.n_rows {
            for (c, w) in self.row(r) {
                let src = x.row_slice(c);
                let dst = &mut out.values_mut()[r * d..(r + 1) * d];
                for (o, v) in dst.iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
    }

    fn mul_dense_transposed(&self, g: &Tensor, out: &mut Tensor) {
        let d = g.cols();
        for r in 0..self.n_rows {
            for (c, w) in self.row(r) {
                let src = g.row_slice(r);
                let dst = &mut out.values_mut()[c * d..(c + 1) * d];
                for (o, v) in dst.iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
    }
}

/// Selector for the generic [`Tape::forward_op`] entry point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    /// `x · W + b`; inputs `[x, W, b]`.
    Affine,
    Relu,
    Sigmoid,
    /// Row-wise softmax.
    Softmax,
    /// Row-wise normalization to zero mean and unit variance.
    LayerNorm,
    /// Average of rows.
    MeanPool,
}

pub const LAYER_NORM_EPS: f64 = 1e-9;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    SpMM(Rc<SparseMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    MeanRows(Var),
    Gather(Var, Vec<usize>),
    RepeatRow(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradient of a scalar with respect to every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .ids()
                .map(|id| {
                    let [r, c] = store.get(id).shape();
                    Tensor::zeros(r, c)
                })
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.grads.iter().fold(0.0, |m, g| m.max(g.max_abs()))
    }

    /// Adds `scale · other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.values_mut().iter_mut().zip(b.values()) {
                *x += scale * y;
            }
        }
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
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

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A copy of `v`'s value that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(m, n);
        matmul_acc(ta.values(), tb.values(), out.values_mut(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::shape("matmul_nt", format!("{:?} x {:?}ᵀ", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = Tensor::zeros(m, n);
        matmul_nt_acc(ta.values(), tb.values(), out.values_mut(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulNT(a, b), rg))
    }

    /// Constant sparse matrix times `x`.
    pub fn sparse_matmul(&mut self, adj: Rc<SparseMatrix>, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if adj.n_cols() != tx.rows() {
            return Err(Error::shape(
                "sparse_matmul",
                format!("{}x{} x {:?}", adj.n_rows(), adj.n_cols(), tx.shape()),
            ));
        }
        let mut out = Tensor::zeros(adj.n_rows(), tx.cols());
        adj.mul_dense(tx, &mut out);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SpMM(adj, x), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(name, ta, tb)?;
        let values = ta.values().iter().zip(tb.values()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.rows(), ta.cols(), values)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds the `1×n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut out = ta.clone();
        let n = ta.cols();
        for (i, v) in out.values_mut().iter_mut().enumerate() {
            *v += tb.values()[i % n];
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.values_mut().iter_mut().for_each(|v| *v *= s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if factors.len() != ta.rows() {
            return Err(Error::shape("scale_rows", format!("{} factors for {} rows", factors.len(), ta.rows())));
        }
        let mut out = ta.clone();
        for (r, f) in factors.iter().enumerate() {
            out.row_slice_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::ScaleRows(a, factors), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.values_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.values_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Row-wise softmax. Columns with `mask[c] == false` get exactly zero weight.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.cols();
        if n == 0 {
            return Err(Error::shape("softmax", "zero-length row"));
        }
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::shape("softmax", format!("mask of {} for {} columns", m.len(), n)));
            }
            if !m.iter().any(|&k| k) {
                return Err(Error::InvalidArgument("softmax: every position masked".into()));
            }
        }
        let keep = |c: usize| mask.map_or(true, |m| m[c]);
        let mut out = Tensor::zeros(ta.rows(), n);
        for r in 0..ta.rows() {
            let row = ta.row_slice(r);
            let max = (0..n).filter(|&c| keep(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
            let dst = out.row_slice_mut(r);
            let mut total = 0.0;
            for c in 0..n {
                if keep(c) {
                    dst[c] = (row[c] - max).exp();
                    total += dst[c];
                }
            }
            dst.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Row-wise `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.cols();
        if n == 0 {
            return Err(Error::shape("layer_norm", "zero-length row"));
        }
        let mut out = ta.clone();
        let mut inv_std = Vec::with_capacity(ta.rows());
        for r in 0..ta.rows() {
            let row = out.row_slice_mut(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::LayerNorm(a, inv_std), rg))
    }

    /// Average of the rows, as a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rows() == 0 {
            return Err(Error::shape("mean_pool", "no rows"));
        }
        // Accumulate deviations from the first row so identical rows pool exactly.
        let m = ta.rows() as f64;
        let first = ta.row_slice(0);
        let mut dev = vec![0.0; ta.cols()];
        for r in 1..ta.rows() {
            for ((d, v), f) in dev.iter_mut().zip(ta.row_slice(r)).zip(first) {
                *d += v - f;
            }
        }
        let out = Tensor::row(first.iter().zip(&dev).map(|(f, d)| f + d / m).collect());
        let rg = self.rg(a);
        Ok(self.push(out, Op::MeanRows(a), rg))
    }

    /// Selects rows `idx` (with repetition allowed).
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= ta.rows()) {
            return Err(Error::OutOfRange(format!("gather row {bad} of {}", ta.rows())));
        }
        let n = ta.cols();
        let mut values = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            values.extend_from_slice(ta.row_slice(i));
        }
        let out = Tensor::new(idx.len(), n, values)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Gather(a, idx), rg))
    }

    /// Stacks `times` copies of the `1×n` row `a`.
    pub fn repeat_row(&mut self, a: Var, times: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.rows() != 1 {
            return Err(Error::shape("repeat_row", format!("expected one row, got {:?}", ta.shape())));
        }
        let values = ta.values().repeat(times);
        let out = Tensor::new(times, ta.cols(), values)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::RepeatRow(a), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::Empty("concat_cols".into()))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row_slice(r);
                out.values_mut()[r * cols + off..r * cols + off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if start + len > ta.cols() {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {}", ta.cols())));
        }
        let mut out = Tensor::zeros(ta.rows(), len);
        for r in 0..ta.rows() {
            out.row_slice_mut(r).copy_from_slice(&ta.row_slice(r)[start..start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Empty("mean".into()));
        }
        let s = self.sum(a);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// `x · W + b` for `x` (m×k), `W` (k×n) and row bias `b` (1×n).
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Generic dispatch over the basic layer operations.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = if kind == OpKind::Affine { 3 } else { 1 };
        if inputs.len() != arity {
            return Err(Error::InvalidArgument(format!(
                "{kind:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match kind {
            OpKind::Affine => self.affine(inputs[0], inputs[1], inputs[2]),
            OpKind::Relu => Ok(self.relu(inputs[0])),
            OpKind::Sigmoid => Ok(self.sigmoid(inputs[0])),
            OpKind::Softmax => self.softmax(inputs[0], None),
            OpKind::LayerNorm => self.layer_norm(inputs[0]),
            OpKind::MeanPool => self.mean_rows(inputs[0]),
        }
    }

    /// Reverse sweep from the scalar `loss`.
    ///
    /// Returns gradients for every parameter of `store`; parameters not
    /// reached from `loss` get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Empty("backward on empty tape".into()));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut out = Gradients::zeros_like(store);
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.route(node, &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn route(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) -> Result<()> {
        let mut acc = |v: Var, f: &dyn Fn(&mut Tensor)| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| {
                let [r, c] = self.nodes[v.0].value.shape();
                Tensor::zeros(r, c)
            });
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let slot = &mut out.grads[id.0];
                if slot.shape() != g.shape() {
                    return Err(Error::shape("backward", format!("parameter {} changed shape", id.0)));
                }
                slot.add_assign(g);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &|s| matmul_nt_acc(g.values(), tb.values(), s.values_mut(), m, n, k));
                acc(*b, &|s| matmul_tn_acc(ta.values(), g.values(), s.values_mut(), m, k, n));
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                acc(*a, &|s| matmul_acc(g.values(), tb.values(), s.values_mut(), m, n, k));
                acc(*b, &|s| matmul_tn_acc(g.values(), ta.values(), s.values_mut(), m, n, k));
            }
            Op::SpMM(adj, x) => acc(*x, &|s| adj.mul_dense_transposed(g, s)),
            Op::Add(a, b) => {
                acc(*a, &|s| s.add_assign(g));
                acc(*b, &|s| s.add_assign(g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| s.add_assign(g));
                acc(*b, &|s| {
                    for (x, y) in s.values_mut().iter_mut().zip(g.values()) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(*a, &|s| {
                    for ((x, gv), bv) in s.values_mut().iter_mut().zip(g.values()).zip(tb.values()) {
                        *x += gv * bv;
                    }
                });
                acc(*b, &|s| {
                    for ((x, gv), av) in s.values_mut().iter_mut().zip(g.values()).zip(ta.values()) {
                        *x += gv * av;
                    }
                });
            }
            Op::AddRow(a, bias) => {
                acc(*a, &|s| s.add_assign(g));
                acc(*bias, &|s| {
                    let n = g.cols();
                    for (i, gv) in g.values().iter().enumerate() {
                        s.values_mut()[i % n] += gv;
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &|s| {
                for (x, gv) in s.values_mut().iter_mut().zip(g.values()) {
                    *x += f * gv;
                }
            }),
            Op::ScaleRows(a, factors) => acc(*a, &|s| {
                for (r, f) in factors.iter().enumerate() {
                    for (x, gv) in s.row_slice_mut(r).iter_mut().zip(g.row_slice(r)) {
                        *x += f * gv;
                    }
                }
            }),
            Op::Relu(a) => {
                let ta = &self.nodes[a.0].value;
                acc(*a, &|s| {
                    for ((x, gv), v) in s.values_mut().iter_mut().zip(g.values()).zip(ta.values()) {
                        if *v > 0.0 {
                            *x += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &|s| {
                for ((x, gv), y) in s.values_mut().iter_mut().zip(g.values()).zip(node.value.values()) {
                    *x += gv * y * (1.0 - y);
                }
            }),
            Op::Softmax(a) => acc(*a, &|s| {
                let y = &node.value;
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((x, p), q) in s.row_slice_mut(r).iter_mut().zip(yr).zip(gr) {
                        *x += p * (q - inner);
                    }
                }
            }),
            Op::LayerNorm(a, inv_std) => acc(*a, &|s| {
                let y = &node.value;
                let n = y.cols() as f64;
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let g_mean = gr.iter().sum::<f64>() / n;
                    let gy_mean = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                    for ((x, gv), yv) in s.row_slice_mut(r).iter_mut().zip(gr).zip(yr) {
                        *x += inv_std[r] * (gv - g_mean - yv * gy_mean);
                    }
                }
            }),
            Op::MeanRows(a) => acc(*a, &|s| {
                let m = s.rows() as f64;
                for r in 0..s.rows() {
                    for (x, gv) in s.row_slice_mut(r).iter_mut().zip(g.values()) {
                        *x += gv / m;
                    }
                }
            }),
            Op::Gather(a, idx) => acc(*a, &|s| {
                for (r, &i) in idx.iter().enumerate() {
                    for (x, gv) in s.row_slice_mut(i).iter_mut().zip(g.row_slice(r)) {
                        *x += gv;
                    }
                }
            }),
            Op::RepeatRow(a) => acc(*a, &|s| {
                for r in 0..g.rows() {
                    for (x, gv) in s.values_mut().iter_mut().zip(g.row_slice(r)) {
                        *x += gv;
                    }
                }
            }),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    acc(*p, &|s| {
                        for r in 0..g.rows() {
                            for (x, gv) in s.row_slice_mut(r).iter_mut().zip(&g.row_slice(r)[off..off + w]) {
                                *x += gv;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols(a, start) => acc(*a, &|s| {
                let w = g.cols();
                for r in 0..g.rows() {
                    for (x, gv) in s.row_slice_mut(r)[*start..*start + w].iter_mut().zip(g.row_slice(r)) {
                        *x += gv;
                    }
                }
            }),
            Op::Sum(a) => {
                let gv = g.values()[0];
                acc(*a, &|s| s.values_mut().iter_mut().for_each(|x| *x += gv));
            }
        }
        Ok(())
    }
}
