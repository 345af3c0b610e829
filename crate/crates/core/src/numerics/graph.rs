//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Operations are recorded on a [`Graph`] in execution order, so node
//! indices are already a topological order and backward is a single reverse
//! sweep. Every operation checks its output for non-finite values.

use std::cell::Cell;

use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};
use super::NumericsError;

/// Handle to a node of a [`Graph`].
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
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    SumAll(Var),
    RowSumSq(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var, Option<Vec<bool>>),
    PickPerRow(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    NormalizeRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

thread_local! {
    static TANH_DERIVATIVE_SCALE: Cell<f64> = const { Cell::new(1.0) };
}

/// Fault injection for the gradient-check battery's own tests.
///
/// Runs `f` with the backward rule of `tanh` multiplied by `scale` on the
/// current thread.
#[doc(hidden)]
pub fn with_tanh_derivative_scale<R>(scale: f64, f: impl FnOnce() -> R) -> R {
    let prev = TANH_DERIVATIVE_SCALE.with(|c| c.replace(scale));
    let out = f();
    TANH_DERIVATIVE_SCALE.with(|c| c.set(prev));
    out
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; exact zeros when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(t) => t,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn check2(op: &'static str, t: &Tensor) -> Result<(usize, usize), NumericsError> {
    if t.shape().len() != 2 {
        return Err(NumericsError::Rank {
            op,
            shape: t.shape().to_vec(),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, NumericsError> {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, value, op, &[a])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, NumericsError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !av.same_shape(bv) {
            return Err(mismatch(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = check2("matmul", av)?;
        let (k2, n) = check2("matmul", bv)?;
        if k != k2 {
            return Err(mismatch("matmul", av, bv));
        }
        let value = Tensor::matrix(m, n, matmul_nn(av.data(), bv.data(), m, k, n))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `a (m×k) · bᵀ` with `b` of shape `n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = check2("matmul_nt", av)?;
        let (n, k2) = check2("matmul_nt", bv)?;
        if k != k2 {
            return Err(mismatch("matmul_nt", av, bv));
        }
        let value = Tensor::matrix(m, n, matmul_nt(av.data(), bv.data(), m, k, n))?;
        self.push("matmul_nt", value, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (av, rv) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let (m, n) = check2("add_row", av)?;
        if rv.shape() != [1, n] {
            return Err(mismatch("add_row", av, rv));
        }
        let mut data = av.data().to_vec();
        for i in 0..m {
            for (x, &b) in data[i * n..(i + 1) * n].iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push("add_row", value, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NumericsError> {
        self.unary("scale", a, Op::Scale(a, s), |x| s * x)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary("tanh", a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary("log", a, Op::Log(a), f64::ln)
    }

    /// Elementwise square root; the backward rule uses 0 at the origin.
    pub fn sqrt(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary("sqrt", a, Op::Sqrt(a), f64::sqrt)
    }

    /// Sum of all entries, as a `1×1` tensor. Summation runs left to right.
    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let total = self.nodes[a.0].value.data().iter().fold(0.0, |acc, &x| acc + x);
        self.push("sum", Tensor::scalar(total), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let n = self.nodes[a.0].value.len();
        if n == 0 {
            return Err(NumericsError::Empty { op: "mean" });
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Squared L2 norm of every row: `m×n → m×1`.
    pub fn row_sum_sq(&mut self, a: Var) -> Result<Var, NumericsError> {
        let av = &self.nodes[a.0].value;
        let (m, _) = check2("row_sum_sq", av)?;
        let data = (0..m)
            .map(|i| av.row(i).iter().fold(0.0, |acc, &x| acc + x * x))
            .collect();
        let value = Tensor::matrix(m, 1, data)?;
        self.push("row_sum_sq", value, Op::RowSumSq(a), &[a])
    }

    /// Max-shifted softmax along each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let av = &self.nodes[a.0].value;
        let (m, n) = check2("softmax_rows", av)?;
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            data.extend(softmax(av.row(i), None));
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push("softmax_rows", value, Op::SoftmaxRows(a), &[a])
    }

    /// Max-shifted log-softmax along each row.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.log_softmax_rows_masked(a, None)
    }

    /// Log-softmax along each row over the entries where `mask` is `true`.
    ///
    /// Excluded entries produce 0 and receive no gradient. Every row needs
    /// at least one included entry.
    pub fn log_softmax_rows_masked(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var, NumericsError> {
        let av = &self.nodes[a.0].value;
        let (m, n) = check2("log_softmax_rows", av)?;
        if let Some(mk) = &mask {
            if mk.len() != m * n {
                return Err(NumericsError::ShapeMismatch {
                    op: "log_softmax_rows",
                    left: av.shape().to_vec(),
                    right: vec![mk.len()],
                });
            }
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row_mask = mask.as_ref().map(|mk| &mk[i * n..(i + 1) * n]);
            let row = av.row(i);
            let lse = log_sum_exp(row, row_mask).ok_or(NumericsError::Empty { op: "log_softmax_rows" })?;
            for (j, &x) in row.iter().enumerate() {
                let included = row_mask.is_none_or(|mk| mk[j]);
                data.push(if included { x - lse } else { 0.0 });
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push("log_softmax_rows", value, Op::LogSoftmaxRows(a, mask), &[a])
    }

    /// Gathers `a[i, idx[i]]` for every row: `m×n → m×1`.
    pub fn pick_per_row(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let av = &self.nodes[a.0].value;
        let (m, n) = check2("pick_per_row", av)?;
        if idx.len() != m || idx.iter().any(|&j| j >= n) {
            return Err(NumericsError::Index {
                op: "pick_per_row",
                shape: av.shape().to_vec(),
            });
        }
        let data = idx.iter().enumerate().map(|(i, &j)| av.get(i, j)).collect();
        let value = Tensor::matrix(m, 1, data)?;
        self.push("pick_per_row", value, Op::PickPerRow(a, idx.to_vec()), &[a])
    }

    /// Index-select along rows.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let av = &self.nodes[a.0].value;
        let (m, _) = check2("select_rows", av)?;
        if idx.iter().any(|&i| i >= m) {
            return Err(NumericsError::Index {
                op: "select_rows",
                shape: av.shape().to_vec(),
            });
        }
        let value = av.select_rows(idx);
        self.push("select_rows", value, Op::SelectRows(a, idx.to_vec()), &[a])
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let av = &self.nodes[a.0].value;
        let (m, n) = check2("slice_cols", av)?;
        if start > end || end > n {
            return Err(NumericsError::Index {
                op: "slice_cols",
                shape: av.shape().to_vec(),
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&av.row(i)[start..end]);
        }
        let value = Tensor::matrix(m, w, data)?;
        self.push("slice_cols", value, Op::SliceCols(a, start, end), &[a])
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or(NumericsError::Empty { op: "concat_cols" })?;
        let m = check2("concat_cols", &self.nodes[first.0].value)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let pv = &self.nodes[p.0].value;
            let (pm, pn) = check2("concat_cols", pv)?;
            if pm != m {
                return Err(mismatch("concat_cols", &self.nodes[first.0].value, pv));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let av = &self.nodes[a.0].value;
        let (m, n) = check2("normalize_rows", av)?;
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = av.row(i);
            let norm = row.iter().fold(0.0, |acc, &x| acc + x * x).sqrt();
            data.extend(row.iter().map(|&x| x / norm));
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push("normalize_rows", value, Op::NormalizeRows(a), &[a])
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients, NumericsError> {
        let out_node = self.nodes.get(output.0).ok_or(NumericsError::UnknownVar)?;
        if out_node.value.len() != 1 {
            return Err(NumericsError::NotScalar {
                shape: out_node.value.shape().to_vec(),
            });
        }
        if !out_node.requires_grad {
            return Err(NumericsError::Detached);
        }
        let tanh_scale = TANH_DERIVATIVE_SCALE.with(Cell::get);
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out_node.value.shape(), 1.0));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (av.rows(), av.cols());
                    let n = bv.cols();
                    if self.requires_grad(*a) {
                        let d = matmul_nt(g.data(), bv.data(), m, n, k);
                        self.accumulate(&mut grads, *a, d);
                    }
                    if self.requires_grad(*b) {
                        let d = matmul_tn(av.data(), g.data(), m, k, n);
                        self.accumulate(&mut grads, *b, d);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (av.rows(), av.cols());
                    let n = bv.rows();
                    if self.requires_grad(*a) {
                        let d = matmul_nn(g.data(), bv.data(), m, n, k);
                        self.accumulate(&mut grads, *a, d);
                    }
                    if self.requires_grad(*b) {
                        let d = matmul_tn(g.data(), av.data(), m, n, k);
                        self.accumulate(&mut grads, *b, d);
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.data().to_vec());
                    self.accumulate(&mut grads, *b, g.into_data());
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *b, g.data().iter().map(|x| -x).collect());
                    self.accumulate(&mut grads, *a, g.into_data());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    let db = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::AddRow(a, row) => {
                    if self.requires_grad(*row) {
                        let n = g.cols();
                        let mut col = vec![0.0; n];
                        for r in 0..g.rows() {
                            for (c, &x) in col.iter_mut().zip(g.row(r)) {
                                *c += x;
                            }
                        }
                        self.accumulate(&mut grads, *row, col);
                    }
                    self.accumulate(&mut grads, *a, g.into_data());
                }
                Op::Scale(a, s) => {
                    self.accumulate(&mut grads, *a, g.data().iter().map(|x| s * x).collect());
                }
                Op::Tanh(a) => {
                    let d = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gx, yx)| gx * (1.0 - yx * yx) * tanh_scale)
                        .collect();
                    self.accumulate(&mut grads, *a, d);
                }
                Op::Exp(a) => {
                    let d = g.data().iter().zip(y.data()).map(|(gx, yx)| gx * yx).collect();
                    self.accumulate(&mut grads, *a, d);
                }
                Op::Log(a) => {
                    let av = self.value(*a);
                    let d = g.data().iter().zip(av.data()).map(|(gx, x)| gx / x).collect();
                    self.accumulate(&mut grads, *a, d);
                }
                Op::Sqrt(a) => {
                    let d = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gx, yx)| if *yx > 0.0 { gx / (2.0 * yx) } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, *a, d);
                }
                Op::SumAll(a) => {
                    let gv = g.data()[0];
                    let n = self.value(*a).len();
                    self.accumulate(&mut grads, *a, vec![gv; n]);
                }
                Op::RowSumSq(a) => {
                    let av = self.value(*a);
                    let n = av.cols();
                    let mut d = Vec::with_capacity(av.len());
                    for r in 0..av.rows() {
                        let gr = g.data()[r];
                        d.extend(av.row(r).iter().map(|x| 2.0 * gr * x));
                    }
                    debug_assert_eq!(d.len(), av.rows() * n);
                    self.accumulate(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let mut d = Vec::with_capacity(y.len());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot = yr.iter().zip(gr).fold(0.0, |acc, (p, q)| acc + p * q);
                        d.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                    }
                    self.accumulate(&mut grads, *a, d);
                }
                Op::LogSoftmaxRows(a, mask) => {
                    let n = y.cols();
                    let mut d = Vec::with_capacity(y.len());
                    for r in 0..y.rows() {
                        let row_mask = mask.as_ref().map(|mk| &mk[r * n..(r + 1) * n]);
                        let included = |j: usize| row_mask.is_none_or(|mk| mk[j]);
                        let (yr, gr) = (y.row(r), g.row(r));
                        let gsum = (0..n).filter(|&j| included(j)).fold(0.0, |acc, j| acc + gr[j]);
                        for j in 0..n {
                            d.push(if included(j) { gr[j] - yr[j].exp() * gsum } else { 0.0 });
                        }
                    }
                    self.accumulate(&mut grads, *a, d);
                }
                Op::PickPerRow(a, idx) => {
                    let av = self.value(*a);
                    let n = av.cols();
                    let mut d = vec![0.0; av.len()];
                    for (r, &j) in idx.iter().enumerate() {
                        d[r * n + j] += g.data()[r];
                    }
                    self.accumulate(&mut grads, *a, d);
                }
                Op::SelectRows(a, idx) => {
                    let av = self.value(*a);
                    let n = av.cols();
                    let mut d = vec![0.0; av.len()];
                    for (r, &src) in idx.iter().enumerate() {
                        for (dx, &gx) in d[src * n..(src + 1) * n].iter_mut().zip(g.row(r)) {
                            *dx += gx;
                        }
                    }
                    self.accumulate(&mut grads, *a, d);
                }
                Op::SliceCols(a, start, end) => {
                    let av = self.value(*a);
                    let n = av.cols();
                    let mut d = vec![0.0; av.len()];
                    for r in 0..av.rows() {
                        d[r * n + start..r * n + end].copy_from_slice(g.row(r));
                    }
                    self.accumulate(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        if self.requires_grad(*p) {
                            let mut d = Vec::with_capacity(g.rows() * w);
                            for r in 0..g.rows() {
                                d.extend_from_slice(&g.row(r)[offset..offset + w]);
                            }
                            self.accumulate(&mut grads, *p, d);
                        }
                        offset += w;
                    }
                }
                Op::NormalizeRows(a) => {
                    let av = self.value(*a);
                    let mut d = Vec::with_capacity(av.len());
                    for r in 0..av.rows() {
                        let (xr, yr, gr) = (av.row(r), y.row(r), g.row(r));
                        let norm = xr.iter().fold(0.0, |acc, &x| acc + x * x).sqrt();
                        let dot = yr.iter().zip(gr).fold(0.0, |acc, (p, q)| acc + p * q);
                        d.extend(yr.iter().zip(gr).map(|(p, q)| (q - p * dot) / norm));
                    }
                    self.accumulate(&mut grads, *a, d);
                }
            }
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (x, d) in t.data_mut().iter_mut().zip(&delta) {
                    *x += d;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, delta).expect("gradient shape follows the node"));
            }
        }
    }
}

/// `log Σ exp(x_j)` over included entries, max-shifted. `None` when nothing is included.
pub fn log_sum_exp(row: &[f64], mask: Option<&[bool]>) -> Option<f64> {
    let included = |j: usize| mask.is_none_or(|mk| mk[j]);
    let max = (0..row.len())
        .filter(|&j| included(j))
        .map(|j| row[j])
        .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |m| m.max(x))))?;
    let s = (0..row.len())
        .filter(|&j| included(j))
        .fold(0.0, |acc, j| acc + (row[j] - max).exp());
    Some(max + s.ln())
}

/// Max-shifted softmax of one row; excluded entries are 0.
pub fn softmax(row: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    match log_sum_exp(row, mask) {
        Some(lse) => row
            .iter()
            .enumerate()
            .map(|(j, &x)| if mask.is_none_or(|mk| mk[j]) { (x - lse).exp() } else { 0.0 })
            .collect(),
        None => vec![0.0; row.len()],
    }
}
