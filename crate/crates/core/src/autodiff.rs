//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! matrices (scalars are 1x1); each recorded node keeps enough context to
//! apply its vector-Jacobian product during [`Tape::backward`]. Graphs are
//! rebuilt for every example, so variable-length sentences and documents
//! need no special handling.
//!
//! ```
//! use treeattn::autodiff::Tape;
//! use treeattn::linalg::Matrix;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Matrix::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).as_scalar(), Some(6.0));
//! ```

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::linalg::{self, Matrix};

/// Handle to a node on a [`Tape`]. Ids increase in creation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Tape::custom`]: receives the output adjoint, the
/// input values and the output value; returns one adjoint per input.
pub type BackwardFn = Box<dyn Fn(&Matrix, &[&Matrix], &Matrix) -> Vec<Matrix>>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Scale(Var, f64),
    Shift(Var),
    AddRowBroadcast(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    SoftmaxRow(Var),
    LogSoftmaxRow(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    MaxPoolRows(Var, Vec<usize>),
    MeanPoolRows(Var),
    Dropout(Var, Matrix),
    Inverse(Var),
    Custom(Vec<Var>, BackwardFn),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
    trainable: bool,
}

/// Dynamic computation graph for one forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    train: bool,
    rng: ChaCha8Rng,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("train", &self.train)
            .finish()
    }
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: HashMap<Var, Matrix>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(&v)
    }

    /// Gradient for a trainable leaf. Panics if `v` is not one.
    pub fn wrt(&self, v: Var) -> &Matrix {
        self.grads
            .get(&v)
            .unwrap_or_else(|| panic!("{v:?} is not a trainable leaf of this tape"))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn log_softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

impl Tape {
    /// Tape in inference mode: dropout is the identity.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Tape in training mode with a seeded dropout generator.
    pub fn training(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].trainable = true;
        v
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), g))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), g))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let g = self.grad_of(&[a]);
        self.push(v, Op::Transpose(a), g)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        let g = self.grad_of(&[a]);
        self.push(v, Op::Scale(a, k), g)
    }

    /// Adds the constant `c` to every entry.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let g = self.grad_of(&[a]);
        self.push(v, Op::Shift(a), g)
    }

    /// Adds the 1xk `row` to every row of the nxk `a`.
    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err(
                "add_row_broadcast",
                format!("{:?} + {:?}", av.shape(), rv.shape()),
            ));
        }
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (x, b) in v.row_mut(r).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let g = self.grad_of(&[a, row]);
        Ok(self.push(v, Op::AddRowBroadcast(a, row), g))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let g = self.grad_of(&[a]);
        self.push(v, Op::Tanh(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let g = self.grad_of(&[a]);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let g = self.grad_of(&[a]);
        self.push(v, Op::Relu(a), g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let g = self.grad_of(&[a]);
        self.push(v, Op::Exp(a), g)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let g = self.grad_of(&[a]);
        self.push(v, Op::Log(a), g)
    }

    /// Clamps entries to `[lo, hi]`; the gradient is zero where clamped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let g = self.grad_of(&[a]);
        self.push(v, Op::Clamp(a, lo, hi), g)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_row(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let g = self.grad_of(&[a]);
        self.push(v, Op::SoftmaxRow(a), g)
    }

    pub fn log_softmax_row(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        let g = self.grad_of(&[a]);
        self.push(v, Op::LogSoftmaxRow(a), g)
    }

    /// Horizontal concatenation; all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput)?;
        let rows = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let g = self.grad_of(parts);
        Ok(self.push(
            Matrix::from_raw(rows, cols, data),
            Op::ConcatCols(parts.to_vec()),
            g,
        ))
    }

    /// Vertical concatenation; all parts share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput)?;
        let cols = self.value(first).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(shape_err("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols;
        let g = self.grad_of(parts);
        Ok(self.push(
            Matrix::from_raw(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            g,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if len == 0 || start + len > av.cols() {
            return Err(shape_err(
                "slice_cols",
                format!("[{start}, {}) of {} columns", start + len, av.cols()),
            ));
        }
        let mut data = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let v = Matrix::from_raw(av.rows(), len, data);
        let g = self.grad_of(&[a]);
        Ok(self.push(v, Op::SliceCols(a, start), g))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if len == 0 || start + len > av.rows() {
            return Err(shape_err(
                "slice_rows",
                format!("[{start}, {}) of {} rows", start + len, av.rows()),
            ));
        }
        let c = av.cols();
        let v = Matrix::from_raw(len, c, av.data()[start * c..(start + len) * c].to_vec());
        let g = self.grad_of(&[a]);
        Ok(self.push(v, Op::SliceRows(a, start), g))
    }

    /// Stacks the selected rows of `table` (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(shape_err(
                "gather_rows",
                format!("row {bad} of {}", tv.rows()),
            ));
        }
        let mut data = Vec::with_capacity(ids.len() * tv.cols());
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let v = Matrix::from_raw(ids.len(), tv.cols(), data);
        let g = self.grad_of(&[table]);
        Ok(self.push(v, Op::GatherRows(table, ids.to_vec()), g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        let g = self.grad_of(&[a]);
        self.push(v, Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let v = Matrix::scalar(av.sum() / av.data().len() as f64);
        let g = self.grad_of(&[a]);
        self.push(v, Op::Mean(a), g)
    }

    /// Column-wise maximum over rows: nxk -> 1xk. Ties pick the earliest row.
    pub fn max_pool_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut best = av.row(0).to_vec();
        let mut arg = vec![0usize; av.cols()];
        for r in 1..av.rows() {
            for (c, &x) in av.row(r).iter().enumerate() {
                if x > best[c] {
                    best[c] = x;
                    arg[c] = r;
                }
            }
        }
        let v = Matrix::from_raw(1, best.len(), best);
        let g = self.grad_of(&[a]);
        self.push(v, Op::MaxPoolRows(a, arg), g)
    }

    /// Column-wise mean over rows: nxk -> 1xk.
    pub fn mean_pool_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.rows() as f64;
        let mut acc = vec![0.0; av.cols()];
        for r in 0..av.rows() {
            for (s, x) in acc.iter_mut().zip(av.row(r)) {
                *s += x;
            }
        }
        acc.iter_mut().for_each(|s| *s /= n);
        let v = Matrix::from_raw(1, acc.len(), acc);
        let g = self.grad_of(&[a]);
        self.push(v, Op::MeanPoolRows(a), g)
    }

    /// Inverted dropout: active only on a training tape with `rate > 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if !self.train || rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let (r, c) = self.shape(a);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mask = Matrix::from_raw(r, c, mask);
        let v = self
            .value(a)
            .hadamard(&mask)
            .expect("mask matches input shape");
        let g = self.grad_of(&[a]);
        self.push(v, Op::Dropout(a, mask), g)
    }

    pub fn matrix_inverse(&mut self, a: Var) -> Result<Var> {
        let v = linalg::invert(self.value(a))?;
        let g = self.grad_of(&[a]);
        Ok(self.push(v, Op::Inverse(a), g))
    }

    /// Records an operation with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Matrix, backward: BackwardFn) -> Var {
        let g = self.grad_of(inputs);
        self.push(value, Op::Custom(inputs.to_vec(), backward), g)
    }

    fn vjp(&self, idx: usize, g: &Matrix, out: &mut Vec<(Var, Matrix)>) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let ew = |x: &Matrix, f: &dyn Fn(f64, f64) -> f64| {
            Matrix::from_raw(
                x.rows(),
                x.cols(),
                x.data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            )
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.scale(-1.0)));
            }
            Op::Mul(a, b) => {
                out.push((*a, g.hadamard(val(*b)).unwrap()));
                out.push((*b, g.hadamard(val(*a)).unwrap()));
            }
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    out.push((*a, g.matmul(&val(*b).transpose()).unwrap()));
                }
                if self.nodes[b.0].needs_grad {
                    out.push((*b, val(*a).transpose().matmul(g).unwrap()));
                }
            }
            Op::Transpose(a) => out.push((*a, g.transpose())),
            Op::Scale(a, k) => out.push((*a, g.scale(*k))),
            Op::Shift(a) => out.push((*a, g.clone())),
            Op::AddRowBroadcast(a, row) => {
                out.push((*a, g.clone()));
                let mut acc = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for (s, x) in acc.iter_mut().zip(g.row(r)) {
                        *s += x;
                    }
                }
                out.push((*row, Matrix::from_raw(1, acc.len(), acc)));
            }
            Op::Tanh(a) => out.push((*a, ew(y, &|t, g| g * (1.0 - t * t)))),
            Op::Sigmoid(a) => out.push((*a, ew(y, &|s, g| g * s * (1.0 - s)))),
            Op::Relu(a) => out.push((*a, ew(val(*a), &|x, g| if x > 0.0 { g } else { 0.0 }))),
            Op::Exp(a) => out.push((*a, ew(y, &|e, g| g * e))),
            Op::Log(a) => out.push((*a, ew(val(*a), &|x, g| g / x))),
            Op::Clamp(a, lo, hi) => out.push((
                *a,
                ew(val(*a), &|x, g| if x > *lo && x < *hi { g } else { 0.0 }),
            )),
            Op::SoftmaxRow(a) => {
                let mut gx = g.clone();
                for r in 0..y.rows() {
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(p, q)| p * q).sum();
                    for (o, (p, q)) in gx.row_mut(r).iter_mut().zip(y.row(r).iter().zip(g.row(r))) {
                        *o = p * (q - dot);
                    }
                }
                out.push((*a, gx));
            }
            Op::LogSoftmaxRow(a) => {
                let mut gx = g.clone();
                for r in 0..y.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for (o, (lp, q)) in gx.row_mut(r).iter_mut().zip(y.row(r).iter().zip(g.row(r)))
                    {
                        *o = q - lp.exp() * total;
                    }
                }
                out.push((*a, gx));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.nodes[p.0].needs_grad {
                        let mut data = Vec::with_capacity(g.rows() * w);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[start..start + w]);
                        }
                        out.push((p, Matrix::from_raw(g.rows(), w, data)));
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut start = 0;
                for &p in parts {
                    let h = val(p).rows();
                    if self.nodes[p.0].needs_grad {
                        let data = g.data()[start * c..(start + h) * c].to_vec();
                        out.push((p, Matrix::from_raw(h, c, data)));
                    }
                    start += h;
                }
            }
            Op::SliceCols(a, start) => {
                let mut gx = Matrix::zeros(val(*a).rows(), val(*a).cols());
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                out.push((*a, gx));
            }
            Op::SliceRows(a, start) => {
                let mut gx = Matrix::zeros(val(*a).rows(), val(*a).cols());
                let c = g.cols();
                gx.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                out.push((*a, gx));
            }
            Op::GatherRows(table, ids) => {
                let mut gx = Matrix::zeros(val(*table).rows(), val(*table).cols());
                for (r, &i) in ids.iter().enumerate() {
                    for (o, x) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                out.push((*table, gx));
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                out.push((*a, Matrix::filled(r, c, g.data()[0])));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                out.push((*a, Matrix::filled(r, c, g.data()[0] / (r * c) as f64)));
            }
            Op::MaxPoolRows(a, arg) => {
                let mut gx = Matrix::zeros(val(*a).rows(), val(*a).cols());
                for (c, &r) in arg.iter().enumerate() {
                    gx[(r, c)] += g.data()[c];
                }
                out.push((*a, gx));
            }
            Op::MeanPoolRows(a) => {
                let (rows, cols) = val(*a).shape();
                let mut gx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    for (o, x) in gx.row_mut(r).iter_mut().zip(g.data()) {
                        *o = x / rows as f64;
                    }
                }
                out.push((*a, gx));
            }
            Op::Dropout(a, mask) => out.push((*a, g.hadamard(mask).unwrap())),
            Op::Inverse(a) => {
                // d(A^-1) = -A^-1 dA A^-1, so the adjoint of A is -B^T G B^T.
                let bt = y.transpose();
                out.push((*a, bt.matmul(g).unwrap().matmul(&bt).unwrap().scale(-1.0)));
            }
            Op::Custom(inputs, rule) => {
                let vals: Vec<&Matrix> = inputs.iter().map(|&v| val(v)).collect();
                for (v, gx) in inputs.iter().zip(rule(g, &vals, y)) {
                    out.push((*v, gx));
                }
            }
        }
    }

    /// Gradient of the scalar `loss` with respect to every trainable leaf.
    ///
    /// Adjoints live only for the duration of the call, so repeated calls
    /// return identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(Error::NotScalar { rows, cols });
        }
        let mut adjoints: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        adjoints.resize_with(loss.0 + 1, || None);
        adjoints[loss.0] = Some(Matrix::scalar(1.0));

        let mut grads = HashMap::new();
        let mut contributions = Vec::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(g) = adjoints[idx].take() else {
                continue;
            };
            if !node.needs_grad {
                continue;
            }
            if node.trainable {
                grads.insert(Var(idx), g);
                continue;
            }
            contributions.clear();
            self.vjp(idx, &g, &mut contributions);
            for (parent, gp) in contributions.drain(..) {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                debug_assert_eq!(gp.shape(), self.nodes[parent.0].value.shape());
                match &mut adjoints[parent.0] {
                    Some(acc) => acc.add_assign(&gp)?,
                    slot @ None => *slot = Some(gp),
                }
            }
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.trainable {
                grads
                    .entry(Var(idx))
                    .or_insert_with(|| Matrix::zeros(node.value.rows(), node.value.cols()));
            }
        }
        Ok(Gradients { grads })
    }
}

/// Finite-difference scheme used by [`grad_check_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`
    Central,
    /// Fourth-order central stencil over `x ± h, x ± 2h`.
    Central5,
    /// Ridders' extrapolation of central differences, starting at step `h`
    /// and shrinking it by 1.4 per round; keeps the estimate with the
    /// smallest error estimate.
    Ridders,
}

fn ridders(mut central: impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    const SHRINK: f64 = 1.4;
    const ROUNDS: usize = 10;
    const SAFE: f64 = 2.0;
    let mut table = [[0.0f64; ROUNDS]; ROUNDS];
    let mut step = h;
    table[0][0] = central(step)?;
    let mut best = table[0][0];
    let mut err = f64::INFINITY;
    for i in 1..ROUNDS {
        step /= SHRINK;
        table[0][i] = central(step)?;
        let mut fac = SHRINK * SHRINK;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= SHRINK * SHRINK;
            let e = (table[j][i] - table[j - 1][i])
                .abs()
                .max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
        if (table[i][i] - table[i - 1][i - 1]).abs() >= SAFE * err {
            break;
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    pub stencil: Stencil,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-4,
            stencil: Stencil::Central,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params
            .iter()
            .filter(move |p| p.max_rel_error.is_nan() || p.max_rel_error >= self.tol)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares backward-pass gradients with central differences.
pub fn grad_check<F>(f: F, params: &[Matrix], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with(
        f,
        params,
        &GradCheckOptions {
            h,
            tol,
            stencil: Stencil::Central,
        },
    )
}

pub fn grad_check_with<F>(
    f: F,
    params: &[Matrix],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.constant(m.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let (rows, cols) = tape.shape(loss);
        tape.value(loss)
            .as_scalar()
            .ok_or(Error::NotScalar { rows, cols })
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|m| tape.param(m.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut work = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let mut check = ParamCheck {
            index: pi,
            max_rel_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..params[pi].data().len() {
            let x0 = params[pi].data()[k];
            let mut at = |offset: f64| -> Result<f64> {
                work[pi].data_mut()[k] = x0 + offset;
                let v = eval(&work);
                work[pi].data_mut()[k] = x0;
                v
            };
            let h = opts.h;
            let numeric = match opts.stencil {
                Stencil::Central => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::Central5 => {
                    (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h)
                }
                Stencil::Ridders => ridders(|s| Ok((at(s)? - at(-s)?) / (2.0 * s)), h)?,
            };
            let a = analytic.data()[k];
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || err.is_nan() {
                check = ParamCheck {
                    index: pi,
                    max_rel_error: if err.is_nan() { f64::INFINITY } else { err },
                    worst_entry: k,
                    analytic: a,
                    numeric,
                };
            }
        }
        report.push(check);
    }
    let passed = report.iter().all(|p| p.max_rel_error < opts.tol);
    Ok(GradCheckReport {
        params: report,
        tol: opts.tol,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn check(f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, params: &[Matrix]) {
        let report = grad_check(f, params, 1e-5, 1e-6).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn square_and_tanh_derivatives() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.backward(y).unwrap().wrt(x).as_scalar(), Some(6.0));

        let mut tape = Tape::new();
        let x = tape.param(Matrix::scalar(0.0));
        let y = tape.tanh(x);
        assert_eq!(tape.backward(y).unwrap().wrt(x).as_scalar(), Some(1.0));
    }

    #[test]
    fn sum_of_param_gives_ones() {
        let mut tape = Tape::new();
        let p = tape.param(seeded(3, 2, 1));
        let other = tape.param(seeded(2, 2, 2));
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(p), &Matrix::filled(3, 2, 1.0));
        assert_eq!(grads.wrt(other), &Matrix::zeros(2, 2));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.param(seeded(2, 2, 1));
        assert!(matches!(
            tape.backward(p),
            Err(Error::NotScalar { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn backward_is_repeatable_and_linear() {
        let build = |tape: &mut Tape, k: f64| {
            let a = tape.param(seeded(3, 3, 4));
            let b = tape.constant(seeded(3, 3, 5));
            let m = tape.matmul(a, b).unwrap();
            let t = tape.tanh(m);
            let s = tape.sum(t);
            (a, tape.scale(s, k))
        };
        let mut tape = Tape::new();
        let (a, loss) = build(&mut tape, 1.0);
        let g1 = tape.backward(loss).unwrap().wrt(a).clone();
        let g2 = tape.backward(loss).unwrap().wrt(a).clone();
        assert_eq!(g1, g2);

        let mut tape3 = Tape::new();
        let (a3, loss3) = build(&mut tape3, 3.0);
        let g3 = tape3.backward(loss3).unwrap().wrt(a3).clone();
        assert!(g3.max_abs_diff(&g1.scale(3.0)).unwrap() < 1e-14);
    }

    #[test]
    fn elementwise_rules() {
        let w = seeded(3, 4, 9);
        let x = seeded(3, 4, 10).map(|v| v.abs() + 0.5);
        check(
            |t, p| {
                let a = t.tanh(p[0]);
                let b = t.sigmoid(p[0]);
                let c = t.exp(p[0]);
                let d = t.log(p[1]);
                let e = t.mul(a, b)?;
                let e = t.add(e, c)?;
                let e = t.sub(e, d)?;
                let e = t.shift(e, 0.3);
                let e = t.scale(e, 1.7);
                let w = t.constant(w.clone());
                let e = t.mul(e, w)?;
                Ok(t.mean(e))
            },
            &[seeded(3, 4, 11), x],
        );
    }

    #[test]
    fn relu_and_clamp_rules() {
        // Entries kept away from the kinks at 0 and +-0.5.
        let p = Matrix::from_rows(&[vec![0.7, -0.3, 0.2], vec![-0.9, 0.45, -0.1]]).unwrap();
        check(
            |t, p| {
                let r = t.relu(p[0]);
                let c = t.clamp(p[0], -0.5, 0.5);
                let s = t.mul(r, c)?;
                let s = t.add(s, c)?;
                Ok(t.sum(s))
            },
            &[p],
        );
    }

    #[test]
    fn structural_rules() {
        let w = seeded(8, 3, 3);
        check(
            |t, p| {
                let ab = t.concat_cols(&[p[0], p[1]])?;
                let rows = t.concat_rows(&[ab, ab])?;
                let s = t.slice_cols(rows, 1, 3)?;
                let r = t.slice_rows(rows, 2, 2)?;
                let tr = t.transpose(rows);
                let m = t.matmul(r, tr)?;
                let w = t.constant(w.clone());
                let mw = t.matmul(m, w)?;
                let sm = t.softmax_row(mw);
                let ls = t.log_softmax_row(mw);
                let x = t.mul(sm, ls)?;
                let mp = t.max_pool_rows(x);
                let mean = t.mean_pool_rows(x);
                let y = t.add(mp, mean)?;
                let g = t.gather_rows(p[2], &[1, 0, 1])?;
                let b = t.add_row_broadcast(g, p[3])?;
                let bs = t.sum(b);
                let ys = t.sum(y);
                let ss = t.tanh(s);
                let ss = t.sum(ss);
                let total = t.add(ys, bs)?;
                t.add(total, ss)
            },
            &[
                seeded(4, 2, 1),
                seeded(4, 3, 2),
                seeded(2, 3, 5),
                seeded(1, 3, 6),
            ],
        );
    }

    #[test]
    fn inverse_gradient_matches_finite_differences() {
        let mut a = seeded(4, 4, 21);
        for i in 0..4 {
            a[(i, i)] += 3.0;
        }
        let weights = seeded(4, 4, 22);
        let report = grad_check(
            |t, p| {
                let inv = t.matrix_inverse(p[0])?;
                let w = t.constant(weights.clone());
                let x = t.mul(inv, w)?;
                Ok(t.sum(x))
            },
            &[a],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn linear_function_is_exact() {
        let w = seeded(3, 3, 8);
        let report = grad_check(
            |t, p| {
                let w = t.constant(w.clone());
                let x = t.mul(p[0], w)?;
                Ok(t.sum(x))
            },
            &[seeded(3, 3, 7)],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-9, "{}", report.max_rel_error());
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let report = grad_check(
            |t, p| {
                let v = t.value(p[0]).map(f64::sin);
                // Deliberately wrong: claims d sin = sin instead of cos.
                let s = t.custom(&[p[0]], v, Box::new(|g, _, y| vec![g.hadamard(y).unwrap()]));
                Ok(t.sum(s))
            },
            &[seeded(2, 2, 1)],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.failures().count(), 1);
    }

    #[test]
    fn ridders_resolves_tiny_gradients() {
        // d/dx of 1 + 1e-9 exp(x) is far below central-difference noise at h = 1e-5.
        let f = |t: &mut Tape, p: &[Var]| {
            let e = t.exp(p[0]);
            let e = t.scale(e, 1e-9);
            let s = t.sum(e);
            Ok(t.shift(s, 1.0))
        };
        let x = seeded(1, 3, 4);
        let plain = grad_check(f, std::slice::from_ref(&x), 1e-5, 1e-6).unwrap();
        let opts = GradCheckOptions {
            h: 1e-2,
            tol: 1e-5,
            stencil: Stencil::Ridders,
        };
        let extrapolated = grad_check_with(f, &[x], &opts).unwrap();
        assert!(extrapolated.passed, "{extrapolated:?}");
        assert!(!plain.passed);
        assert!(extrapolated.max_rel_error() * 100.0 < plain.max_rel_error());
    }

    #[test]
    fn ridders_still_catches_a_corrupted_rule() {
        let opts = GradCheckOptions {
            h: 1e-3,
            tol: 1e-4,
            stencil: Stencil::Ridders,
        };
        let report = grad_check_with(
            |t, p| {
                let v = t.value(p[0]).map(f64::cos);
                let s = t.custom(&[p[0]], v, Box::new(|g, _, y| vec![g.hadamard(y).unwrap()]));
                Ok(t.sum(s))
            },
            &[seeded(3, 1, 2)],
            &opts,
        )
        .unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn dropout_is_identity_at_inference_and_inverted_in_training() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::filled(4, 5, 2.0));
        assert_eq!(tape.dropout(x, 0.5), x);

        let mut tape = Tape::training(3);
        let x = tape.param(Matrix::filled(40, 50, 2.0));
        let y = tape.dropout(x, 0.25);
        let vals = tape.value(y).data();
        assert!(vals
            .iter()
            .all(|&v| v == 0.0 || (v - 2.0 / 0.75).abs() < 1e-12));
        let kept = vals.iter().filter(|&&v| v != 0.0).count() as f64 / vals.len() as f64;
        assert!((kept - 0.75).abs() < 0.05);

        let mut again = Tape::training(3);
        let x2 = again.param(Matrix::filled(40, 50, 2.0));
        let y2 = again.dropout(x2, 0.25);
        assert_eq!(tape.value(y), again.value(y2));
    }

    #[test]
    fn softmax_is_overflow_safe() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[vec![1000.0, 1000.0]]).unwrap());
        let s = tape.softmax_row(x);
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
        let l = tape.log_softmax_row(x);
        assert!((tape.value(l).data()[0] + 2f64.ln()).abs() < 1e-12);
    }
}
