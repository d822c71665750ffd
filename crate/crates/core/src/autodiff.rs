//! Tape-based reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! Every differentiable computation in the engine is recorded on a [`Tape`].
//! Operations are appended in execution order, so the tape index order is a
//! valid topological order and the backward pass simply walks it in reverse.
//!
//! Tensors are always two dimensional (`[rows, cols]`); vectors are `1×n` or
//! `n×1` and scalars are `1×1`. Binary arithmetic broadcasts dimensions of
//! size one.
//!
//! ```
//! use cmil::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.param(Tensor::scalar(4.0));
//! let z = tape.mul(x, y).unwrap();
//! let grads = tape.backward(z).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 4.0);
//! assert_eq!(grads.get(y).unwrap().item(), 3.0);
//! ```

use std::cell::RefCell;
use std::fmt::Write as _;
use std::sync::Arc;

use statrs::function::erf::erf;

use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Dense row-major matrix of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "tensor",
                left: [rows, cols],
                right: [data.len(), 1],
            });
        }
        Ok(Self {
            shape: [rows, cols],
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: [rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(1, 1, value)
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self {
            shape: [1, n],
            data,
        }
    }

    pub fn column_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self {
            shape: [n, 1],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: [r, c],
                    right: [1, row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(r, c, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.shape[1];
        &mut self.data[r * c..(r + 1) * c]
    }

    /// The single value of a `1×1` tensor (or the first value of any tensor).
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Tensor {
        let [r, c] = self.shape;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: [c, r],
            data: out,
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let [n, k] = self.shape;
        let [k2, m] = other.shape;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape,
                right: other.shape,
            });
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * m..(i + 1) * m];
            for (p, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: [n, m],
            data: out,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.shape[1];
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: [idx.len(), c],
            data,
        }
    }

    /// Column means as a `1×cols` tensor. Empty input yields zeros.
    pub fn mean_rows(&self) -> Tensor {
        let [r, c] = self.shape;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        if r > 0 {
            for o in &mut out {
                *o /= r as f64;
            }
        }
        Tensor::row_vector(out)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Copy, Clone, Debug, PartialEq)]
enum Unary {
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Gelu,
    LeakyRelu(f64),
    Square,
    Sqrt,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Unary, Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, f64),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    SumCols(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Arc<Vec<usize>>),
    ScatterAddRows(Var, Arc<Vec<usize>>),
    SegmentMean(Var, Arc<Vec<Vec<usize>>>),
    SegmentSoftmax(Var, Arc<Vec<usize>>),
    LogSumExpSets(Var, Arc<Vec<Vec<usize>>>),
    CosineRows(Var, Var),
    SteMask(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Binary(Binary::Div, ..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Unary(Unary::Exp, _) => "exp",
            Op::Unary(Unary::Log, _) => "log",
            Op::Unary(Unary::Sigmoid, _) => "sigmoid",
            Op::Unary(Unary::Tanh, _) => "tanh",
            Op::Unary(Unary::Gelu, _) => "gelu",
            Op::Unary(Unary::LeakyRelu(_), _) => "leaky_relu",
            Op::Unary(Unary::Square, _) => "square",
            Op::Unary(Unary::Sqrt, _) => "sqrt",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LayerNormRows(..) => "layer_norm_rows",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::SumCols(_) => "sum_cols",
            Op::Transpose(_) => "transpose",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterAddRows(..) => "scatter_add_rows",
            Op::SegmentMean(..) => "segment_mean",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::LogSumExpSets(..) => "log_sum_exp_sets",
            Op::CosineRows(..) => "cosine_rows",
            Op::SteMask(_) => "ste_mask",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::CosineRows(a, b) => vec![*a, *b],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Unary(_, a)
            | Op::SoftmaxRows(a)
            | Op::LayerNormRows(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::Transpose(a)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::ScatterAddRows(a, _)
            | Op::SegmentMean(a, _)
            | Op::SegmentSoftmax(a, _)
            | Op::LogSumExpSets(a, _)
            | Op::SteMask(a) => vec![*a],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations. One tape per training step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the given shape when `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, shape: [usize; 2]) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape[0], shape[1]))
    }
}

fn broadcast_shape(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Result<[usize; 2]> {
    let mut out = [0; 2];
    for d in 0..2 {
        out[d] = if a[d] == b[d] {
            a[d]
        } else if a[d] == 1 {
            b[d]
        } else if b[d] == 1 {
            a[d]
        } else {
            return Err(Error::Shape {
                op,
                left: a,
                right: b,
            });
        };
    }
    Ok(out)
}

#[inline]
fn bidx(shape: [usize; 2], i: usize, j: usize) -> usize {
    let r = if shape[0] == 1 { 0 } else { i };
    let c = if shape[1] == 1 { 0 } else { j };
    r * shape[1] + c
}

/// Sum a broadcast gradient back down to `shape`.
fn reduce_to(grad: &Tensor, shape: [usize; 2]) -> Tensor {
    if grad.shape == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape[0], shape[1]);
    let [r, c] = grad.shape;
    for i in 0..r {
        for j in 0..c {
            out.data[bidx(shape, i, j)] += grad.data[i * c + j];
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf without gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(nodes.len() - 1)
    }

    pub fn scalar_constant(&self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// A copy of `v`'s value cut off from the graph.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.value(v);
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes.borrow()[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Text listing of every recorded operation, for debugging.
    pub fn dump(&self) -> String {
        let nodes = self.nodes.borrow();
        let mut s = String::new();
        for (i, n) in nodes.iter().enumerate() {
            let parents: Vec<String> = n.op.parents().iter().map(|p| format!("%{}", p.0)).collect();
            let _ = writeln!(
                s,
                "%{i} = {}({}) : {:?}{}",
                n.op.name(),
                parents.join(", "),
                n.value.shape,
                if n.requires_grad { " grad" } else { "" }
            );
        }
        s
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)?
        };
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn binary(&self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let name = Op::Binary(kind, a, b).name();
            let shape = broadcast_shape(name, x.shape, y.shape)?;
            let mut data = Vec::with_capacity(shape[0] * shape[1]);
            for i in 0..shape[0] {
                for j in 0..shape[1] {
                    let u = x.data[bidx(x.shape, i, j)];
                    let v = y.data[bidx(y.shape, i, j)];
                    data.push(match kind {
                        Binary::Add => u + v,
                        Binary::Sub => u - v,
                        Binary::Mul => u * v,
                        Binary::Div => u / v,
                    });
                }
            }
            Tensor { shape, data }
        };
        Ok(self.push(out, Op::Binary(kind, a, b)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.with_value(a, |t| t.map(|x| x * c));
        self.push(out, Op::Scale(a, c))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let out = self.with_value(a, |t| t.map(|x| x + c));
        self.push(out, Op::AddScalar(a))
    }

    fn unary(&self, kind: Unary, a: Var) -> Var {
        let out = self.with_value(a, |t| {
            t.map(|x| match kind {
                Unary::Exp => x.exp(),
                Unary::Log => x.ln(),
                Unary::Sigmoid => sigmoid(x),
                Unary::Tanh => x.tanh(),
                Unary::Gelu => gelu(x),
                Unary::LeakyRelu(s) => {
                    if x > 0.0 {
                        x
                    } else {
                        s * x
                    }
                }
                Unary::Square => x * x,
                Unary::Sqrt => x.sqrt(),
            })
        });
        self.push(out, Op::Unary(kind, a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(Unary::LeakyRelu(slope), a)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    /// Softmax across the columns of each row, log-sum-exp stabilised.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let out = self.with_value(a, |t| {
            let mut o = t.clone();
            for r in 0..t.rows() {
                let row = o.row_mut(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    s += *x;
                }
                for x in row.iter_mut() {
                    *x /= s;
                }
            }
            o
        });
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Per-row normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&self, a: Var, eps: f64) -> Var {
        let out = self.with_value(a, |t| {
            let mut o = t.clone();
            let c = t.cols() as f64;
            for r in 0..t.rows() {
                let row = o.row_mut(r);
                let mean = row.iter().sum::<f64>() / c;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
                let inv = 1.0 / (var + eps).sqrt();
                for x in row.iter_mut() {
                    *x = (*x - mean) * inv;
                }
            }
            o
        });
        self.push(out, Op::LayerNormRows(a, eps))
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = self.with_value(a, |t| Tensor::scalar(t.sum()));
        self.push(out, Op::SumAll(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let out = self.with_value(a, |t| Tensor::scalar(t.sum() / t.len() as f64));
        self.push(out, Op::MeanAll(a))
    }

    /// Sum over columns: `[r, c] -> [r, 1]`.
    pub fn sum_rows(&self, a: Var) -> Var {
        let out = self.with_value(a, |t| {
            Tensor::column_vector((0..t.rows()).map(|r| t.row(r).iter().sum()).collect())
        });
        self.push(out, Op::SumRows(a))
    }

    /// Sum over rows: `[r, c] -> [1, c]`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let out = self.with_value(a, |t| {
            let mut o = vec![0.0; t.cols()];
            for r in 0..t.rows() {
                for (s, x) in o.iter_mut().zip(t.row(r)) {
                    *s += x;
                }
            }
            Tensor::row_vector(o)
        });
        self.push(out, Op::SumCols(a))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.with_value(a, Tensor::transpose);
        self.push(out, Op::Transpose(a))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let rows = parts
                .first()
                .map(|p| nodes[p.0].value.rows())
                .ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
            let cols: usize = parts.iter().map(|p| nodes[p.0].value.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for p in parts {
                let s = nodes[p.0].value.shape;
                if s[0] != rows {
                    return Err(Error::Shape {
                        op: "concat_cols",
                        left: nodes[parts[0].0].value.shape,
                        right: s,
                    });
                }
            }
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.0].value.row(r));
                }
            }
            Tensor {
                shape: [rows, cols],
                data,
            }
        };
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let cols = parts
                .first()
                .map(|p| nodes[p.0].value.cols())
                .ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                if v.cols() != cols {
                    return Err(Error::Shape {
                        op: "concat_rows",
                        left: nodes[parts[0].0].value.shape,
                        right: v.shape,
                    });
                }
                rows += v.rows();
                data.extend_from_slice(&v.data);
            }
            Tensor {
                shape: [rows, cols],
                data,
            }
        };
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&self, a: Var, start: usize, width: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if start + width > t.cols() {
                return Err(Error::InvalidAxis {
                    op: "slice_cols",
                    detail: format!("columns {start}..{} of {}", start + width, t.cols()),
                });
            }
            let mut data = Vec::with_capacity(t.rows() * width);
            for r in 0..t.rows() {
                data.extend_from_slice(&t.row(r)[start..start + width]);
            }
            Tensor {
                shape: [t.rows(), width],
                data,
            }
        };
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn gather_rows(&self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
                return Err(Error::InvalidAxis {
                    op: "gather_rows",
                    detail: format!("row {bad} of {}", t.rows()),
                });
            }
            t.select_rows(&idx)
        };
        Ok(self.push(out, Op::GatherRows(a, idx)))
    }

    /// `out[idx[e]] += a[e]` for every row `e`; output has `n` rows.
    pub fn scatter_add_rows(&self, a: Var, idx: Arc<Vec<usize>>, n: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if idx.len() != t.rows() {
                return Err(Error::Shape {
                    op: "scatter_add_rows",
                    left: t.shape,
                    right: [idx.len(), 1],
                });
            }
            let mut o = Tensor::zeros(n, t.cols());
            for (e, &i) in idx.iter().enumerate() {
                if i >= n {
                    return Err(Error::InvalidAxis {
                        op: "scatter_add_rows",
                        detail: format!("row {i} of {n}"),
                    });
                }
                for (x, y) in o.row_mut(i).iter_mut().zip(t.row(e)) {
                    *x += y;
                }
            }
            o
        };
        Ok(self.push(out, Op::ScatterAddRows(a, idx)))
    }

    /// Mean of the rows in each group; an empty group yields a zero row.
    pub fn segment_mean(&self, a: Var, groups: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let mut o = Tensor::zeros(groups.len(), t.cols());
            for (g, members) in groups.iter().enumerate() {
                if members.is_empty() {
                    continue;
                }
                let w = 1.0 / members.len() as f64;
                for &i in members {
                    if i >= t.rows() {
                        return Err(Error::InvalidAxis {
                            op: "segment_mean",
                            detail: format!("row {i} of {}", t.rows()),
                        });
                    }
                    for (x, y) in o.row_mut(g).iter_mut().zip(t.row(i)) {
                        *x += w * y;
                    }
                }
            }
            o
        };
        Ok(self.push(out, Op::SegmentMean(a, groups)))
    }

    /// Softmax of a column vector within segments: entries sharing `seg[e]`
    /// are normalised together.
    pub fn segment_softmax(&self, a: Var, seg: Arc<Vec<usize>>) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.cols() != 1 || t.rows() != seg.len() {
                return Err(Error::Shape {
                    op: "segment_softmax",
                    left: t.shape,
                    right: [seg.len(), 1],
                });
            }
            let nseg = seg.iter().copied().max().map_or(0, |m| m + 1);
            let mut max = vec![f64::NEG_INFINITY; nseg];
            for (e, &s) in seg.iter().enumerate() {
                max[s] = max[s].max(t.data[e]);
            }
            let mut sum = vec![0.0; nseg];
            let mut data: Vec<f64> = seg
                .iter()
                .enumerate()
                .map(|(e, &s)| {
                    let v = (t.data[e] - max[s]).exp();
                    sum[s] += v;
                    v
                })
                .collect();
            for (e, &s) in seg.iter().enumerate() {
                data[e] /= sum[s];
            }
            Tensor::column_vector(data)
        };
        Ok(self.push(out, Op::SegmentSoftmax(a, seg)))
    }

    /// `out[s] = log Σ_{j ∈ sets[s]} exp(a[j])` for a column vector `a`.
    pub fn log_sum_exp_sets(&self, a: Var, sets: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.cols() != 1 {
                return Err(Error::InvalidAxis {
                    op: "log_sum_exp_sets",
                    detail: format!("expected a column vector, got {:?}", t.shape),
                });
            }
            let mut data = Vec::with_capacity(sets.len());
            for set in sets.iter() {
                if set.is_empty() || set.iter().any(|&j| j >= t.rows()) {
                    return Err(Error::InvalidAxis {
                        op: "log_sum_exp_sets",
                        detail: format!("index set {set:?} over {} rows", t.rows()),
                    });
                }
                data.push(log_sum_exp(set.iter().map(|&j| t.data[j])));
            }
            Tensor::column_vector(data)
        };
        Ok(self.push(out, Op::LogSumExpSets(a, sets)))
    }

    /// Row-wise cosine similarity, `[n, d] × [n, d] -> [n, 1]`. A zero-norm
    /// row gives similarity 0 and no gradient.
    pub fn cosine_rows(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.shape != y.shape {
                return Err(Error::Shape {
                    op: "cosine_rows",
                    left: x.shape,
                    right: y.shape,
                });
            }
            Tensor::column_vector(
                (0..x.rows())
                    .map(|r| cosine(x.row(r), y.row(r)).0)
                    .collect(),
            )
        };
        Ok(self.push(out, Op::CosineRows(a, b)))
    }

    /// Straight-through mask: the forward value is `sample` exactly, the
    /// backward pass is the identity onto `p`.
    pub fn ste_mask(&self, p: Var, sample: &[bool]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[p.0].value;
            if t.len() != sample.len() {
                return Err(Error::Shape {
                    op: "ste_mask",
                    left: t.shape,
                    right: [sample.len(), 1],
                });
            }
            Tensor {
                shape: t.shape,
                data: sample.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect(),
            }
        };
        Ok(self.push(out, Op::SteMask(p)))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shape = nodes[root.0].value.shape;
        if shape != [1, 1] {
            return Err(Error::NonScalarRoot(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            {
                let mut acc = |v: Var, delta: Tensor| {
                    if !nodes[v.0].requires_grad {
                        return;
                    }
                    match &mut grads[v.0] {
                        Some(existing) => existing.add_assign(&delta),
                        slot @ None => *slot = Some(delta),
                    }
                };
                let val = &node.value;
                match &node.op {
                    Op::Leaf => {}
                    Op::MatMul(a, b) => {
                        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                        if nodes[a.0].requires_grad {
                            acc(*a, g.matmul(&bv.transpose())?);
                        }
                        if nodes[b.0].requires_grad {
                            acc(*b, av.transpose().matmul(&g)?);
                        }
                    }
                    Op::Binary(kind, a, b) => {
                        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                        let [r, c] = g.shape;
                        let mut ga = Tensor::zeros(r, c);
                        let mut gb = Tensor::zeros(r, c);
                        for i in 0..r {
                            for j in 0..c {
                                let k = i * c + j;
                                let x = av.data[bidx(av.shape, i, j)];
                                let y = bv.data[bidx(bv.shape, i, j)];
                                let (da, db) = match kind {
                                    Binary::Add => (1.0, 1.0),
                                    Binary::Sub => (1.0, -1.0),
                                    Binary::Mul => (y, x),
                                    Binary::Div => (1.0 / y, -x / (y * y)),
                                };
                                ga.data[k] = g.data[k] * da;
                                gb.data[k] = g.data[k] * db;
                            }
                        }
                        acc(*a, reduce_to(&ga, av.shape));
                        acc(*b, reduce_to(&gb, bv.shape));
                    }
                    Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
                    Op::AddScalar(a) => acc(*a, g.clone()),
                    Op::Unary(kind, a) => {
                        let x = &nodes[a.0].value;
                        let data = g
                            .data
                            .iter()
                            .zip(&x.data)
                            .zip(&val.data)
                            .map(|((&gi, &xi), &yi)| {
                                gi * match kind {
                                    Unary::Exp => yi,
                                    Unary::Log => 1.0 / xi,
                                    Unary::Sigmoid => yi * (1.0 - yi),
                                    Unary::Tanh => 1.0 - yi * yi,
                                    Unary::Gelu => gelu_grad(xi),
                                    Unary::LeakyRelu(s) => {
                                        if xi > 0.0 {
                                            1.0
                                        } else if xi < 0.0 {
                                            *s
                                        } else {
                                            0.0
                                        }
                                    }
                                    Unary::Square => 2.0 * xi,
                                    Unary::Sqrt => 0.5 / yi,
                                }
                            })
                            .collect();
                        acc(
                            *a,
                            Tensor {
                                shape: g.shape,
                                data,
                            },
                        );
                    }
                    Op::SoftmaxRows(a) => {
                        let mut out = g.clone();
                        for r in 0..val.rows() {
                            let y = val.row(r);
                            let gr = g.row(r);
                            let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((o, &yi), &gi) in out.row_mut(r).iter_mut().zip(y).zip(gr) {
                                *o = yi * (gi - dot);
                            }
                        }
                        acc(*a, out);
                    }
                    Op::LayerNormRows(a, eps) => {
                        let x = &nodes[a.0].value;
                        let c = x.cols() as f64;
                        let mut out = Tensor::zeros(x.rows(), x.cols());
                        for r in 0..x.rows() {
                            let xr = x.row(r);
                            let mean = xr.iter().sum::<f64>() / c;
                            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
                            let inv = 1.0 / (var + eps).sqrt();
                            let yr = val.row(r);
                            let gr = g.row(r);
                            let mg = gr.iter().sum::<f64>() / c;
                            let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c;
                            for ((o, &gi), &yi) in out.row_mut(r).iter_mut().zip(gr).zip(yr) {
                                *o = inv * (gi - mg - yi * mgy);
                            }
                        }
                        acc(*a, out);
                    }
                    Op::SumAll(a) => {
                        let s = nodes[a.0].value.shape;
                        acc(*a, Tensor::full(s[0], s[1], g.item()));
                    }
                    Op::MeanAll(a) => {
                        let s = nodes[a.0].value.shape;
                        let n = (s[0] * s[1]) as f64;
                        acc(*a, Tensor::full(s[0], s[1], g.item() / n));
                    }
                    Op::SumRows(a) => {
                        let s = nodes[a.0].value.shape;
                        let mut out = Tensor::zeros(s[0], s[1]);
                        for r in 0..s[0] {
                            out.row_mut(r).fill(g.data[r]);
                        }
                        acc(*a, out);
                    }
                    Op::SumCols(a) => {
                        let s = nodes[a.0].value.shape;
                        let mut out = Tensor::zeros(s[0], s[1]);
                        for r in 0..s[0] {
                            out.row_mut(r).copy_from_slice(&g.data);
                        }
                        acc(*a, out);
                    }
                    Op::Transpose(a) => acc(*a, g.transpose()),
                    Op::ConcatCols(parts) => {
                        let mut offset = 0;
                        for p in parts {
                            let s = nodes[p.0].value.shape;
                            let mut out = Tensor::zeros(s[0], s[1]);
                            for r in 0..s[0] {
                                out.row_mut(r)
                                    .copy_from_slice(&g.row(r)[offset..offset + s[1]]);
                            }
                            offset += s[1];
                            acc(*p, out);
                        }
                    }
                    Op::ConcatRows(parts) => {
                        let mut offset = 0;
                        for p in parts {
                            let s = nodes[p.0].value.shape;
                            let n = s[0] * s[1];
                            let out = Tensor {
                                shape: s,
                                data: g.data[offset..offset + n].to_vec(),
                            };
                            offset += n;
                            acc(*p, out);
                        }
                    }
                    Op::SliceCols(a, start) => {
                        let s = nodes[a.0].value.shape;
                        let w = g.cols();
                        let mut out = Tensor::zeros(s[0], s[1]);
                        for r in 0..s[0] {
                            out.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                        }
                        acc(*a, out);
                    }
                    Op::GatherRows(a, idx) => {
                        let s = nodes[a.0].value.shape;
                        let mut out = Tensor::zeros(s[0], s[1]);
                        for (e, &i) in idx.iter().enumerate() {
                            for (x, y) in out.row_mut(i).iter_mut().zip(g.row(e)) {
                                *x += y;
                            }
                        }
                        acc(*a, out);
                    }
                    Op::ScatterAddRows(a, idx) => acc(*a, g.select_rows(idx)),
                    Op::SegmentMean(a, groups) => {
                        let s = nodes[a.0].value.shape;
                        let mut out = Tensor::zeros(s[0], s[1]);
                        for (gi, members) in groups.iter().enumerate() {
                            if members.is_empty() {
                                continue;
                            }
                            let w = 1.0 / members.len() as f64;
                            for &i in members {
                                for (x, y) in out.row_mut(i).iter_mut().zip(g.row(gi)) {
                                    *x += w * y;
                                }
                            }
                        }
                        acc(*a, out);
                    }
                    Op::SegmentSoftmax(a, seg) => {
                        let nseg = seg.iter().copied().max().map_or(0, |m| m + 1);
                        let mut dot = vec![0.0; nseg];
                        for (e, &s) in seg.iter().enumerate() {
                            dot[s] += g.data[e] * val.data[e];
                        }
                        let data = seg
                            .iter()
                            .enumerate()
                            .map(|(e, &s)| val.data[e] * (g.data[e] - dot[s]))
                            .collect();
                        acc(*a, Tensor::column_vector(data));
                    }
                    Op::LogSumExpSets(a, sets) => {
                        let x = &nodes[a.0].value;
                        let mut out = Tensor::zeros(x.rows(), 1);
                        for (s, set) in sets.iter().enumerate() {
                            let lse = val.data[s];
                            for &j in set {
                                out.data[j] += g.data[s] * (x.data[j] - lse).exp();
                            }
                        }
                        acc(*a, out);
                    }
                    Op::CosineRows(a, b) => {
                        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
                        let mut ga = Tensor::zeros(x.rows(), x.cols());
                        let mut gb = Tensor::zeros(x.rows(), x.cols());
                        for r in 0..x.rows() {
                            let (c, na, nb) = cosine(x.row(r), y.row(r));
                            if na == 0.0 || nb == 0.0 {
                                continue;
                            }
                            let gr = g.data[r];
                            for k in 0..x.cols() {
                                let (xa, yb) = (x.get(r, k), y.get(r, k));
                                ga.set(r, k, gr * (yb / (na * nb) - c * xa / (na * na)));
                                gb.set(r, k, gr * (xa / (na * nb) - c * yb / (nb * nb)));
                            }
                        }
                        acc(*a, ga);
                        acc(*b, gb);
                    }
                    Op::SteMask(p) => acc(*p, g.clone()),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// (cosine, |a|, |b|) with cosine 0 when either norm vanishes.
fn cosine(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        (0.0, na, nb)
    } else {
        (dot / (na * nb), na, nb)
    }
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(1, |numeric|)` over all coordinates.
    pub max_rel_error: f64,
    /// The same maximum restricted to each input.
    pub per_input: Vec<f64>,
}

/// Compare reverse-mode gradients of a scalar function against central
/// differences with the given step.
///
/// `f` builds the function on a fresh tape from leaves it receives; it is
/// called once for the analytic pass and twice per coordinate.
pub fn grad_check<F>(mut f: F, point: &[Tensor], step: f64) -> Result<GradCheck>
where
    F: FnMut(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&tape, &vars)?;
    let base = tape.item(root);
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check base point".into()));
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(point)
        .map(|(v, t)| grads.get_or_zeros(*v, t.shape()))
        .collect();

    let mut eval = |pt: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = pt.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&tape, &vars)?;
        Ok(tape.item(root))
    };

    let mut per_input = vec![0.0_f64; point.len()];
    let mut work: Vec<Tensor> = point.to_vec();
    for (i, t) in point.iter().enumerate() {
        for k in 0..t.len() {
            let orig = t.data[k];
            work[i].data[k] = orig + step;
            let plus = eval(&work)?;
            work[i].data[k] = orig - step;
            let minus = eval(&work)?;
            work[i].data[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("input {i}, coordinate {k}")));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic[i].data[k] - numeric).abs() / numeric.abs().max(1.0);
            per_input[i] = per_input[i].max(err);
        }
    }
    Ok(GradCheck {
        max_rel_error: per_input.iter().cloned().fold(0.0, f64::max),
        per_input,
    })
}
