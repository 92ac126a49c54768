//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. [`Var`] is a
//! cheap copyable handle into it. [`Tape::backward`] walks the record in
//! exact reverse order and may only run once per tape.

use std::cell::{Cell, Ref, RefCell};
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::special::{digamma_unchecked, log_gamma_unchecked, trigamma_unchecked};
use super::tensor::{matmul_raw, matmul_t_raw, t_matmul_raw, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    AddCol(usize, usize),
    MulCol(usize, usize),
    AddScalar(usize, usize),
    MulScalar(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Recip(usize),
    Relu(usize),
    Clamp(usize, f64, f64),
    FloorAt(usize, f64),
    LogGamma(usize),
    Digamma(usize),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    ColumnMax(usize, Vec<usize>),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LogSumExpRows(usize),
    LayerNormRows(usize, f64),
    SelectRows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    Pick(usize, Vec<(usize, usize)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-pass operation record.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// influence the loss.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[v.id];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var<'_>) -> Tensor {
        match self.grads[v.id].take() {
            Some(g) => g,
            None => {
                let [r, c] = self.shapes[v.id];
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, true)
    }

    /// Input that never needs a gradient (noise, masks, data).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn push(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let rg = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push_node(value, op, rg)
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a scalar `loss`. Errors on a non-scalar loss, a
    /// foreign variable, or a second call on the same tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss was recorded on another tape".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let shapes: Vec<[usize; 2]> = nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn col_sums(t: &Tensor) -> Tensor {
    let mut out = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    Tensor::row_vector(out)
}

fn row_sums(t: &Tensor) -> Tensor {
    Tensor::col_vector((0..t.rows()).map(|r| t.row(r).iter().sum()).collect())
}

fn broadcast_row(t: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let cols = t.cols();
    let data = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| f(v, row.data()[i % cols]))
        .collect();
    Tensor::from_vec(t.rows(), cols, data)
}

fn broadcast_col(t: &Tensor, col: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let cols = t.cols();
    let data = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| f(v, col.data()[i / cols]))
        .collect();
    Tensor::from_vec(t.rows(), cols, data)
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols();
    for r in 0..x.rows() {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

fn logsumexp_rows(x: &Tensor) -> Tensor {
    Tensor::col_vector(
        (0..x.rows())
            .map(|r| {
                let row = x.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect(),
    )
}

fn layer_norm_stats(x: &Tensor, eps: f64) -> Vec<(f64, f64)> {
    let n = x.cols() as f64;
    (0..x.rows())
        .map(|r| {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| &nodes[i].value;
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            accumulate(grads, nodes, *a, g.zip_map(val(*b), |g, y| g * y));
            accumulate(grads, nodes, *b, g.zip_map(val(*a), |g, x| g * x));
        }
        Op::Div(a, b) => {
            let bv = val(*b);
            accumulate(grads, nodes, *a, g.zip_map(bv, |g, y| g / y));
            let t = g.zip_map(out, |g, o| g * o).zip_map(bv, |v, y| -v / y);
            accumulate(grads, nodes, *b, t);
        }
        Op::AddRow(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, col_sums(g));
        }
        Op::MulRow(a, b) => {
            accumulate(grads, nodes, *a, broadcast_row(g, val(*b), |g, y| g * y));
            accumulate(grads, nodes, *b, col_sums(&g.zip_map(val(*a), |g, x| g * x)));
        }
        Op::AddCol(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, row_sums(g));
        }
        Op::MulCol(a, b) => {
            accumulate(grads, nodes, *a, broadcast_col(g, val(*b), |g, y| g * y));
            accumulate(grads, nodes, *b, row_sums(&g.zip_map(val(*a), |g, x| g * x)));
        }
        Op::AddScalar(a, s) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *s, Tensor::scalar(g.sum()));
        }
        Op::MulScalar(a, s) => {
            let sv = val(*s).item();
            accumulate(grads, nodes, *a, g.scale(sv));
            let d: f64 = g.data().iter().zip(val(*a).data()).map(|(g, x)| g * x).sum();
            accumulate(grads, nodes, *s, Tensor::scalar(d));
        }
        Op::Neg(a) => accumulate(grads, nodes, *a, g.scale(-1.0)),
        Op::Scale(a, c) => accumulate(grads, nodes, *a, g.scale(*c)),
        Op::Offset(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::Exp(a) => accumulate(grads, nodes, *a, g.zip_map(out, |g, y| g * y)),
        Op::Ln(a) => accumulate(grads, nodes, *a, g.zip_map(val(*a), |g, x| g / x)),
        Op::Sqrt(a) => accumulate(grads, nodes, *a, g.zip_map(out, |g, y| g / (2.0 * y))),
        Op::Square(a) => accumulate(grads, nodes, *a, g.zip_map(val(*a), |g, x| 2.0 * g * x)),
        Op::Recip(a) => accumulate(grads, nodes, *a, g.zip_map(out, |g, y| -g * y * y)),
        Op::Relu(a) => {
            accumulate(grads, nodes, *a, g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }))
        }
        Op::Clamp(a, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            let t = g.zip_map(val(*a), |g, x| if x >= lo && x <= hi { g } else { 0.0 });
            accumulate(grads, nodes, *a, t)
        }
        Op::FloorAt(a, floor) => {
            let f = *floor;
            accumulate(grads, nodes, *a, g.zip_map(val(*a), |g, x| if x > f { g } else { 0.0 }))
        }
        Op::LogGamma(a) => {
            accumulate(grads, nodes, *a, g.zip_map(val(*a), |g, x| g * digamma_unchecked(x)))
        }
        Op::Digamma(a) => {
            accumulate(grads, nodes, *a, g.zip_map(val(*a), |g, x| g * trigamma_unchecked(x)))
        }
        Op::MatMul(a, b) => {
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, matmul_t_raw(g, val(*b)));
            }
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, t_matmul_raw(val(*a), g));
            }
        }
        Op::MatMulT(a, b) => {
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, matmul_raw(g, val(*b)));
            }
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, t_matmul_raw(g, val(*a)));
            }
        }
        Op::Transpose(a) => accumulate(grads, nodes, *a, g.transpose()),
        Op::Sum(a) => {
            let [r, c] = val(*a).shape();
            accumulate(grads, nodes, *a, Tensor::filled(r, c, g.item()));
        }
        Op::SumRows(a) => {
            let [r, c] = val(*a).shape();
            accumulate(grads, nodes, *a, broadcast_row(&Tensor::zeros(r, c), g, |_, y| y));
        }
        Op::SumCols(a) => {
            let [r, c] = val(*a).shape();
            accumulate(grads, nodes, *a, broadcast_col(&Tensor::zeros(r, c), g, |_, y| y));
        }
        Op::ColumnMax(a, argmax) => {
            let [r, c] = val(*a).shape();
            let mut t = Tensor::zeros(r, c);
            for (j, &i) in argmax.iter().enumerate() {
                t.set(i, j, g.get(0, j));
            }
            accumulate(grads, nodes, *a, t);
        }
        Op::SoftmaxRows(a) => {
            let gy = g.zip_map(out, |g, y| g * y);
            let s = row_sums(&gy);
            let cols = out.cols();
            let data: Vec<f64> = (0..out.len())
                .map(|i| out.data()[i] * (g.data()[i] - s.data()[i / cols]))
                .collect();
            accumulate(grads, nodes, *a, Tensor::from_vec(out.rows(), cols, data));
        }
        Op::LogSoftmaxRows(a) => {
            let s = row_sums(g);
            let cols = out.cols();
            let data: Vec<f64> = (0..out.len())
                .map(|i| g.data()[i] - out.data()[i].exp() * s.data()[i / cols])
                .collect();
            accumulate(grads, nodes, *a, Tensor::from_vec(out.rows(), cols, data));
        }
        Op::LogSumExpRows(a) => {
            let p = softmax_rows(val(*a));
            accumulate(grads, nodes, *a, broadcast_col(&p, g, |p, g| p * g));
        }
        Op::LayerNormRows(a, eps) => {
            let x = val(*a);
            let stats = layer_norm_stats(x, *eps);
            let cols = x.cols();
            let n = cols as f64;
            let mut dx = vec![0.0; x.len()];
            for (r, &(mean, inv_std)) in stats.iter().enumerate() {
                let xr = x.row(r);
                let gr = g.row(r);
                let mut mg = 0.0;
                let mut mgx = 0.0;
                for j in 0..cols {
                    let xh = (xr[j] - mean) * inv_std;
                    mg += gr[j];
                    mgx += gr[j] * xh;
                }
                mg /= n;
                mgx /= n;
                for j in 0..cols {
                    let xh = (xr[j] - mean) * inv_std;
                    dx[r * cols + j] = inv_std * (gr[j] - mg - xh * mgx);
                }
            }
            accumulate(grads, nodes, *a, Tensor::from_vec(x.rows(), cols, dx));
        }
        Op::SelectRows(a, idx) => {
            let [r, c] = val(*a).shape();
            let mut t = Tensor::zeros(r, c);
            for (k, &i) in idx.iter().enumerate() {
                let src = g.row(k);
                for (dst, s) in t.data_mut()[i * c..(i + 1) * c].iter_mut().zip(src) {
                    *dst += s;
                }
            }
            accumulate(grads, nodes, *a, t);
        }
        Op::ConcatRows(parts) => {
            let mut start = 0;
            for &p in parts {
                let rows = val(p).rows();
                let idx: Vec<usize> = (start..start + rows).collect();
                accumulate(grads, nodes, p, g.select_rows(&idx));
                start += rows;
            }
        }
        Op::Pick(a, pos) => {
            let [r, c] = val(*a).shape();
            let mut t = Tensor::zeros(r, c);
            for (k, &(i, j)) in pos.iter().enumerate() {
                t.data_mut()[i * c + j] += g.data()[k];
            }
            accumulate(grads, nodes, *a, t);
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor {
        self.tape.value_ref(self.id).clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.value_ref(self.id))
    }

    pub fn shape(&self) -> [usize; 2] {
        self.with_value(|t| t.shape())
    }

    pub fn rows(&self) -> usize {
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.shape()[1]
    }

    /// Value of a `1x1` variable.
    pub fn item(&self) -> f64 {
        self.with_value(|t| t.item())
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let v = f(&self.tape.value_ref(self.id));
        self.tape.push(v, op, &[self.id])
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl FnOnce(&Tensor, &Tensor) -> Tensor) -> Var<'t> {
        assert!(std::ptr::eq(self.tape, other.tape), "variables from different tapes");
        let v = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            f(&a, &b)
        };
        self.tape.push(v, op, &[self.id, other.id])
    }

    fn check_same(a: &Tensor, b: &Tensor, what: &str) {
        assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
    }

    /// Adds a `1xn` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        self.binary(row, Op::AddRow(self.id, row.id), |a, b| {
            assert_eq!((b.rows(), b.cols()), (1, a.cols()), "add_row shape");
            broadcast_row(a, b, |x, y| x + y)
        })
    }

    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        self.binary(row, Op::MulRow(self.id, row.id), |a, b| {
            assert_eq!((b.rows(), b.cols()), (1, a.cols()), "mul_row shape");
            broadcast_row(a, b, |x, y| x * y)
        })
    }

    /// Adds an `mx1` column to every column.
    pub fn add_col(self, col: Var<'t>) -> Var<'t> {
        self.binary(col, Op::AddCol(self.id, col.id), |a, b| {
            assert_eq!((b.rows(), b.cols()), (a.rows(), 1), "add_col shape");
            broadcast_col(a, b, |x, y| x + y)
        })
    }

    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        self.binary(col, Op::MulCol(self.id, col.id), |a, b| {
            assert_eq!((b.rows(), b.cols()), (a.rows(), 1), "mul_col shape");
            broadcast_col(a, b, |x, y| x * y)
        })
    }

    pub fn add_scalar_var(self, s: Var<'t>) -> Var<'t> {
        self.binary(s, Op::AddScalar(self.id, s.id), |a, s| a.map(|x| x + s.item()))
    }

    pub fn mul_scalar_var(self, s: Var<'t>) -> Var<'t> {
        self.binary(s, Op::MulScalar(self.id, s.id), |a, s| a.scale(s.item()))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |a| a.scale(c))
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(Op::Offset(self.id), |a| a.map(|x| x + c))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |a| a.map(f64::exp))
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Ln(self.id), |a| a.map(f64::ln))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), |a| a.map(f64::sqrt))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |a| a.map(|x| x * x))
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(Op::Recip(self.id), |a| a.map(|x| 1.0 / x))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |a| a.map(|x| x.max(0.0)))
    }

    /// Clamps into `[lo, hi]`; the gradient is cut outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(self.id, lo, hi), |a| a.map(|x| x.clamp(lo, hi)))
    }

    /// `max(x, floor)` element-wise.
    pub fn floor_at(self, floor: f64) -> Var<'t> {
        self.unary(Op::FloorAt(self.id, floor), |a| a.map(|x| x.max(floor)))
    }

    pub fn log_gamma(self) -> Var<'t> {
        self.unary(Op::LogGamma(self.id), |a| a.map(log_gamma_unchecked))
    }

    pub fn digamma(self) -> Var<'t> {
        self.unary(Op::Digamma(self.id), |a| a.map(digamma_unchecked))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| {
            assert_eq!(a.cols(), b.rows(), "matmul inner dimensions");
            matmul_raw(a, b)
        })
    }

    /// `self * other^T`.
    pub fn matmul_t(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::MatMulT(self.id, other.id), |a, b| {
            assert_eq!(a.cols(), b.cols(), "matmul_t inner dimensions");
            matmul_t_raw(a, b)
        })
    }

    pub fn t(self) -> Var<'t> {
        self.unary(Op::Transpose(self.id), Tensor::transpose)
    }

    /// Sum of all entries as a `1x1`.
    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |a| Tensor::scalar(a.sum()))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.with_value(Tensor::len) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Column-wise sum over rows, `mxn -> 1xn`.
    pub fn sum_rows(self) -> Var<'t> {
        self.unary(Op::SumRows(self.id), col_sums)
    }

    /// Row-wise sum over columns, `mxn -> mx1`.
    pub fn sum_cols(self) -> Var<'t> {
        self.unary(Op::SumCols(self.id), row_sums)
    }

    /// Column-wise maximum over rows, `mxn -> 1xn`.
    pub fn column_max(self) -> Var<'t> {
        let (value, argmax) = self.with_value(|a| {
            let mut best = a.row(0).to_vec();
            let mut arg = vec![0; a.cols()];
            for r in 1..a.rows() {
                for (j, &v) in a.row(r).iter().enumerate() {
                    if v > best[j] {
                        best[j] = v;
                        arg[j] = r;
                    }
                }
            }
            (Tensor::row_vector(best), arg)
        });
        self.tape.push(value, Op::ColumnMax(self.id, argmax), &[self.id])
    }

    /// Softmax along each row, evaluated after subtracting the row maximum.
    pub fn softmax_rows(self) -> Var<'t> {
        self.unary(Op::SoftmaxRows(self.id), softmax_rows)
    }

    pub fn log_softmax_rows(self) -> Var<'t> {
        self.unary(Op::LogSoftmaxRows(self.id), |a| {
            let l = logsumexp_rows(a);
            broadcast_col(a, &l, |x, l| x - l)
        })
    }

    /// `mxn -> mx1` log-sum-exp per row.
    pub fn logsumexp_rows(self) -> Var<'t> {
        self.unary(Op::LogSumExpRows(self.id), logsumexp_rows)
    }

    /// Row-wise standardisation without affine parameters.
    pub fn layer_norm_rows(self, eps: f64) -> Var<'t> {
        self.unary(Op::LayerNormRows(self.id, eps), |a| {
            let stats = layer_norm_stats(a, eps);
            let cols = a.cols();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let (m, s) = stats[i / cols];
                    (x - m) * s
                })
                .collect();
            Tensor::from_vec(a.rows(), cols, data)
        })
    }

    /// Gathers rows by index; repeated indices accumulate gradient.
    pub fn select_rows(self, idx: &[usize]) -> Var<'t> {
        let v = self.with_value(|a| {
            assert!(idx.iter().all(|&i| i < a.rows()), "select_rows index out of range");
            a.select_rows(idx)
        });
        self.tape.push(v, Op::SelectRows(self.id, idx.to_vec()), &[self.id])
    }

    pub fn row(self, i: usize) -> Var<'t> {
        self.select_rows(&[i])
    }

    /// Entries at `(row, col)` positions as a `kx1` column.
    pub fn pick(self, positions: &[(usize, usize)]) -> Var<'t> {
        let v = self.with_value(|a| {
            Tensor::col_vector(positions.iter().map(|&(i, j)| a.get(i, j)).collect())
        });
        self.tape.push(v, Op::Pick(self.id, positions.to_vec()), &[self.id])
    }

    /// Stacks variables with equal column counts vertically.
    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let v = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| tape.value_ref(p.id)).collect();
            let cols = vals[0].cols();
            assert!(vals.iter().all(|t| t.cols() == cols), "concat_rows column mismatch");
            let rows = vals.iter().map(|t| t.rows()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for t in &vals {
                data.extend_from_slice(t.data());
            }
            Tensor::from_vec(rows, cols, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push(v, Op::ConcatRows(ids.clone()), &ids)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, Op::Add(self.id, o.id), |a, b| {
            Var::check_same(a, b, "add");
            a.zip_map(b, |x, y| x + y)
        })
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, Op::Sub(self.id, o.id), |a, b| {
            Var::check_same(a, b, "sub");
            a.zip_map(b, |x, y| x - y)
        })
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, Op::Mul(self.id, o.id), |a, b| {
            Var::check_same(a, b, "mul");
            a.zip_map(b, |x, y| x * y)
        })
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, Op::Div(self.id, o.id), |a, b| {
            Var::check_same(a, b, "div");
            a.zip_map(b, |x, y| x / y)
        })
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |a| a.scale(-1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let loss = x.square();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let loss = x * x;
        assert!(tape.backward(loss).is_ok());
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x.exp()), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_loss_and_unused_inputs_get_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::row_vector(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::zeros(3, 1));
        let c = tape.scalar(4.0);
        let loss = c.scale(2.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x), Tensor::zeros(1, 2));
        assert_eq!(g.wrt(unused), Tensor::zeros(3, 1));
    }

    #[test]
    fn softmax_is_stable_and_normalised() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![1000.0, 0.0], vec![0.0, 3f64.ln()]]).unwrap());
        let y = x.softmax_rows().value();
        assert_eq!(y.row(0), &[0.5, 0.5]);
        assert_eq!(y.get(1, 0), 1.0);
        assert!(y.get(1, 1) < 1e-300);
        assert!((y.get(2, 0) - 0.25).abs() < 1e-15);
        assert!((y.get(2, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn reuse_accumulates() {
        // d/dx (x*x + 3x) = 2x + 3
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5));
        let loss = x * x + x.scale(3.0);
        assert_eq!(tape.backward(loss).unwrap().wrt(x).item(), 6.0);
    }
}
