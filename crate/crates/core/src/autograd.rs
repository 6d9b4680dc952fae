//! Define-by-run reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation as a node in topological order, so the
//! backward pass is a single reverse sweep. Parameters are borrowed from a
//! [`ParamStore`] rather than copied, and their gradients are collected per
//! [`ParamId`].

use std::borrow::Cow;
use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, gemm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Gelu(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix,
        count: usize,
    },
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Values of parameter leaves borrow from the store.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    param_nodes: HashMap<ParamId, Var>,
    track_params: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            track_params: true,
        }
    }

    /// A graph whose parameters do not require gradients (inference only).
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on a non-scalar node");
        m.get(0, 0)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, false)
    }

    /// Input leaf whose gradient is recorded (used for input-gradient checks).
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(
            Cow::Borrowed(store.value(id)),
            Op::Param,
            self.track_params,
        );
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul(self.value(a), self.value(b));
        self.push_owned(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul_nt(self.value(a), self.value(b));
        self.push_owned(out, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push_owned(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push_owned(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push_owned(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} row");
        let mut out = self.value(a).clone();
        let rv = self.value(row).data().to_vec();
        for i in 0..r {
            for (o, b) in out.row_mut(i).iter_mut().zip(&rv) {
                *o += b;
            }
        }
        self.push_owned(out, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (r, _) = self.shape(a);
        assert_eq!(self.shape(col), (r, 1), "mul_col expects a {r}x1 column");
        let mut out = self.value(a).clone();
        let cv = self.value(col).data().to_vec();
        for (i, s) in cv.iter().enumerate() {
            for o in out.row_mut(i) {
                *o *= s;
            }
        }
        self.push_owned(out, Op::MulCol(a, col), &[a, col])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push_owned(out, Op::Scale(a, s), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push_owned(out, Op::Transpose(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(tensor::gelu);
        self.push_owned(out, Op::Gelu(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(tensor::softplus);
        self.push_owned(out, Op::Softplus(a), &[a])
    }

    /// Row-wise layer normalization with learnable `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gain), (1, c));
        assert_eq!(self.shape(bias), (1, c));
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Matrix::zeros(r, c);
        let mut out = Matrix::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat.set(i, j, h);
                out.set(i, j, h * g[j] + b[j]);
            }
        }
        self.push_owned(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Row-wise softmax. `allowed[i * cols + j] == false` forces that
    /// probability to exactly zero; every row needs at least one allowed entry.
    pub fn softmax_rows(&mut self, x: Var, allowed: Option<&[bool]>) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        if let Some(mask) = allowed {
            assert_eq!(mask.len(), r * c, "softmax mask size");
        }
        let mut out = Matrix::zeros(r, c);
        for i in 0..r {
            let row = xv.row(i);
            let ok = |j: usize| allowed.map_or(true, |m| m[i * c + j]);
            let max = (0..c)
                .filter(|&j| ok(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(max.is_finite() || max == f64::INFINITY, "softmax row {i} fully masked");
            let mut total = 0.0;
            for j in 0..c {
                if ok(j) {
                    let e = (row[j] - max).exp();
                    out.set(i, j, e);
                    total += e;
                }
            }
            for v in out.row_mut(i) {
                *v /= total;
            }
        }
        self.push_owned(out, Op::Softmax(x), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let out = Matrix::from_vec(rows, cols, data).expect("concat_rows");
        self.push_owned(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
            }
            off += m.cols();
        }
        self.push_owned(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = self.value(x);
        assert!(start + len <= m.rows(), "slice_rows out of range");
        let c = m.cols();
        let out = Matrix::from_vec(len, c, m.data()[start * c..(start + len) * c].to_vec())
            .expect("slice_rows");
        self.push_owned(out, Op::SliceRows(x, start), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = self.value(x);
        assert!(start + len <= m.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(m.rows(), len);
        for i in 0..m.rows() {
            out.row_mut(i).copy_from_slice(&m.row(i)[start..start + len]);
        }
        self.push_owned(out, Op::SliceCols(x, start), &[x])
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let m = self.value(x);
        let c = m.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(m.row(i));
        }
        let out = Matrix::from_vec(idx.len(), c, data).expect("gather_rows");
        self.push_owned(out, Op::GatherRows(x, idx.to_vec()), &[x])
    }

    /// Places row `k` of `x` at row `idx[k]` of a zero `rows x cols` matrix.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Var {
        let m = self.value(x);
        assert_eq!(m.rows(), idx.len());
        let mut out = Matrix::zeros(rows, m.cols());
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(m.row(k));
        }
        self.push_owned(out, Op::ScatterRows(x, idx.to_vec()), &[x])
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let (r, c) = m.shape();
        let mut out = Matrix::zeros(1, c);
        for row in m.row_iter() {
            for (o, v) in out.data_mut().iter_mut().zip(row) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / r as f64);
        self.push_owned(out, Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push_owned(Matrix::filled(1, 1, s), Op::Sum(x), &[x])
    }

    /// Mean over non-`None` targets of `-log softmax(logits_row)[target]`.
    /// Returns `None` when every target is padding.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Option<Var> {
        let lv = self.value(logits);
        let (r, c) = lv.shape();
        assert_eq!(r, targets.len(), "cross_entropy target count");
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return None;
        }
        let mut probs = Matrix::zeros(r, c);
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            for j in 0..c {
                probs.set(i, j, (row[j] - lse).exp());
            }
            if let Some(t) = *t {
                loss += lse - row[t];
            }
        }
        let out = Matrix::filled(1, 1, loss / count as f64);
        Some(self.push_owned(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            param_nodes: self.param_nodes.clone(),
        }
    }

    fn propagate(&self, node: &Node<'a>, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| -> &Matrix { &self.nodes[v.0].value };
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, m: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&m),
                slot @ None => *slot = Some(m),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    let mut da = Matrix::zeros(val(*a).rows(), val(*a).cols());
                    gemm(1.0, g, false, val(*b), true, 0.0, &mut da);
                    acc(*a, da);
                }
                if wants(*b) {
                    let mut db = Matrix::zeros(val(*b).rows(), val(*b).cols());
                    gemm(1.0, val(*a), true, g, false, 0.0, &mut db);
                    acc(*b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                if wants(*a) {
                    let mut da = Matrix::zeros(val(*a).rows(), val(*a).cols());
                    gemm(1.0, g, false, val(*b), false, 0.0, &mut da);
                    acc(*a, da);
                }
                if wants(*b) {
                    let mut db = Matrix::zeros(val(*b).rows(), val(*b).cols());
                    gemm(1.0, g, true, val(*a), false, 0.0, &mut db);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if wants(*row) {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for r in g.row_iter() {
                        for (o, v) in dr.data_mut().iter_mut().zip(r) {
                            *o += v;
                        }
                    }
                    acc(*row, dr);
                }
            }
            Op::MulCol(a, col) => {
                let cv = val(*col);
                if wants(*a) {
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        let s = cv.get(i, 0);
                        for o in da.row_mut(i) {
                            *o *= s;
                        }
                    }
                    acc(*a, da);
                }
                if wants(*col) {
                    let av = val(*a);
                    let mut dc = Matrix::zeros(cv.rows(), 1);
                    for i in 0..cv.rows() {
                        dc.set(i, 0, tensor::dot(g.row(i), av.row(i)));
                    }
                    acc(*col, dc);
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Gelu(a) => acc(*a, g.zip_map(val(*a), |d, x| d * tensor::gelu_grad(x))),
            Op::Softplus(a) => acc(*a, g.zip_map(val(*a), |d, x| d * tensor::sigmoid(x))),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = xhat.shape();
                let gv = val(*gain).data();
                if wants(*x) {
                    let mut dx = Matrix::zeros(r, c);
                    for i in 0..r {
                        let gr = g.row(i);
                        let hr = xhat.row(i);
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(d, w)| d * w).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h = tensor::dot(&dh, hr) / c as f64;
                        for j in 0..c {
                            dx.set(i, j, inv_std[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h));
                        }
                    }
                    acc(*x, dx);
                }
                if wants(*gain) {
                    let mut dg = Matrix::zeros(1, c);
                    for i in 0..r {
                        for j in 0..c {
                            dg.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
                        }
                    }
                    acc(*gain, dg);
                }
                if wants(*bias) {
                    let mut db = Matrix::zeros(1, c);
                    for row in g.row_iter() {
                        for (o, v) in db.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let s = tensor::dot(yr, gr);
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = yr[j] * (gr[j] - s);
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    if wants(p) {
                        let m = Matrix::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec())
                            .expect("concat_rows grad");
                        acc(p, m);
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    if wants(p) {
                        let mut m = Matrix::zeros(r, c);
                        for i in 0..r {
                            m.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        acc(p, m);
                    }
                    off += c;
                }
            }
            Op::SliceRows(x, start) => {
                let (r, c) = val(*x).shape();
                let mut m = Matrix::zeros(r, c);
                m.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*x, m);
            }
            Op::SliceCols(x, start) => {
                let (r, c) = val(*x).shape();
                let mut m = Matrix::zeros(r, c);
                for i in 0..r {
                    m.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*x, m);
            }
            Op::GatherRows(x, idx) => {
                let (r, c) = val(*x).shape();
                let mut m = Matrix::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in m.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(*x, m);
            }
            Op::ScatterRows(x, idx) => {
                let (r, c) = val(*x).shape();
                let mut m = Matrix::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    m.row_mut(k).copy_from_slice(g.row(i));
                }
                acc(*x, m);
            }
            Op::MeanRows(x) => {
                let (r, c) = val(*x).shape();
                let mut m = Matrix::zeros(r, c);
                let inv = 1.0 / r as f64;
                for i in 0..r {
                    for (o, v) in m.row_mut(i).iter_mut().zip(g.data()) {
                        *o = v * inv;
                    }
                }
                acc(*x, m);
            }
            Op::Sum(x) => {
                let (r, c) = val(*x).shape();
                acc(*x, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let scale = g.get(0, 0) / *count as f64;
                let mut m = Matrix::zeros(probs.rows(), probs.cols());
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for (o, p) in m.row_mut(i).iter_mut().zip(probs.row(i)) {
                            *o = p * scale;
                        }
                        let cur = m.get(i, t);
                        m.set(i, t, cur - scale);
                    }
                }
                acc(*logits, m);
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    param_nodes: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a node, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.param_nodes.get(&id).and_then(|&v| self.wrt(v))
    }

    /// Gradients for every parameter that took part, in parameter-id order.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Matrix)> {
        let mut ids: Vec<(ParamId, Var)> = self.param_nodes.iter().map(|(&p, &v)| (p, v)).collect();
        ids.sort();
        ids.into_iter()
            .filter_map(|(p, v)| self.grads.get_mut(v.0).and_then(|g| g.take()).map(|g| (p, g)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks d(loss)/d(input) against central differences for a graph builder
    /// taking a single input leaf.
    fn check(build: impl Fn(&mut Graph, Var) -> Var, x: Matrix) {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let loss = build(&mut g, xv);
        let grads = g.backward(loss);
        let analytic = grads.wrt(xv).cloned().unwrap_or(Matrix::zeros(x.rows(), x.cols()));
        let h = 1e-6;
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let v = g.input(xp);
                let l = build(&mut g, v);
                g.scalar(l)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                "element {i}: analytic {a} vs numeric {fd}"
            );
        }
    }

    #[test]
    fn elementwise_and_matmul_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&mut rng, 4, 3);
        let w2 = random(&mut rng, 5, 4);
        check(
            |g, x| {
                let wv = g.constant(w.clone());
                let y = g.matmul(x, wv);
                let y = g.gelu(y);
                let w2v = g.constant(w2.clone());
                let z = g.matmul_nt(w2v, x);
                let z = g.softplus(z);
                let s1 = g.sum(y);
                let s2 = g.sum(z);
                let s = g.add(s1, s2);
                g.scale(s, 0.5)
            },
            random(&mut rng, 2, 4),
        );
    }

    #[test]
    fn layer_norm_and_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gain = random(&mut rng, 1, 5);
        let bias = random(&mut rng, 1, 5);
        let target = random(&mut rng, 3, 5);
        let mask: Vec<bool> = (0..15).map(|i| i % 4 != 1).collect();
        check(
            |g, x| {
                let gv = g.constant(gain.clone());
                let bv = g.constant(bias.clone());
                let y = g.layer_norm(x, gv, bv, 1e-5);
                let p = g.softmax_rows(y, Some(&mask));
                let t = g.constant(target.clone());
                let m = g.mul(p, t);
                g.sum(m)
            },
            random(&mut rng, 3, 5),
        );
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let col = random(&mut rng, 3, 1);
        let t = random(&mut rng, 4, 3);
        check(
            |g, x| {
                let a = g.slice_cols(x, 1, 3);
                let b = g.slice_rows(x, 0, 2);
                let b = g.slice_cols(b, 0, 3);
                let c = g.concat_rows(&[a, b]);
                let c = g.gather_rows(c, &[4, 0, 2]);
                let cv = g.constant(col.clone());
                let c = g.mul_col(c, cv);
                let s = g.scatter_rows(c, &[3, 1, 0], 4);
                let m = g.mean_rows(x);
                let m = g.slice_cols(m, 0, 3);
                let s = g.add_row(s, m);
                let k = g.concat_cols(&[s, s]);
                let k = g.slice_cols(k, 2, 3);
                let k = g.transpose(k);
                let k = g.transpose(k);
                let tv = g.constant(t.clone());
                let p = g.mul(k, tv);
                let q = g.sub(p, k);
                let q = g.mul(q, q);
                g.sum(q)
            },
            random(&mut rng, 3, 4),
        );
    }

    #[test]
    fn cross_entropy_gradient_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let targets = vec![Some(2), None, Some(0)];
        check(
            |g, x| g.cross_entropy(x, &targets).unwrap(),
            random(&mut rng, 3, 4),
        );
        let mut g = Graph::new();
        let x = g.input(Matrix::zeros(2, 3));
        assert!(g.cross_entropy(x, &[None, None]).is_none());
    }

    #[test]
    fn params_are_deduplicated_and_collected() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Matrix::filled(1, 2, 3.0));
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let m = g.mul(a, b);
        let s = g.sum(m);
        let grads = g.backward(s).into_param_grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1.data(), &[6.0, 6.0]);
    }
}
