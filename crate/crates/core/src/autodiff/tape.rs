use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_at_into, matmul_bt_into, Tensor};
use crate::math;
use crate::numerics;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    LogAddExp(Var, Var),
    Gather(Var, Vec<usize>),
    IndexRows(Var, Vec<usize>),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Reshape(Var),
    RepeatCols(Var, usize),
    ClampMin(Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Affine(..) => "affine",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumCols(_) => "sum_cols",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LogSumExp(_) => "log_sum_exp",
            Op::LogAddExp(..) => "log_add_exp",
            Op::Gather(..) => "gather",
            Op::IndexRows(..) => "index_rows",
            Op::Concat(_) => "concat",
            Op::Slice(..) => "slice",
            Op::Reshape(_) => "reshape",
            Op::RepeatCols(..) => "repeat_cols",
            Op::ClampMin(..) => "clamp_min",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::LogAddExp(a, b) => vec![*a, *b],
            Op::Affine(x, w, b) => vec![*x, *w, *b],
            Op::Concat(parts) => parts.clone(),
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumCols(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::LogSoftmax(a)
            | Op::LogSumExp(a)
            | Op::Gather(a, _)
            | Op::IndexRows(a, _)
            | Op::Slice(a, _, _)
            | Op::Reshape(a)
            | Op::RepeatCols(a, _)
            | Op::ClampMin(a, _) => vec![*a],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Reverse-mode computation tape.
///
/// Nodes are appended in creation order, so every node's parents precede it.
/// A tape is single-threaded; build a fresh one per loss evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to a node, if the loss depends on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// One gradient per parameter in `store`, zero where the loss does not
    /// reach the parameter.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, value)| {
                self.params
                    .get(&id)
                    .and_then(|v| self.grads[v.0].clone())
                    .unwrap_or_else(|| Tensor::zeros(value.rows(), value.cols()))
            })
            .collect()
    }
}

fn broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() || (b.rows() == 1 && b.cols() == a.cols())
}

fn binary_map(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if !broadcast_ok(a, b) {
        return Err(Error::shape(op, alloc::format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let cols = a.cols();
    let bs = b.as_slice();
    let row_bcast = b.rows() == 1 && a.rows() != 1;
    let data = a
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, if row_bcast { bs[i % cols] } else { bs[i] }))
        .collect();
    Tensor::new(a.rows(), a.cols(), data)
}

fn eval<'a>(op: &Op, v: &dyn Fn(Var) -> &'a Tensor) -> Result<Tensor> {
    Ok(match op {
        Op::Constant | Op::Param => unreachable!("leaves are not evaluated"),
        Op::Add(a, b) => binary_map("add", v(*a), v(*b), |x, y| x + y)?,
        Op::Sub(a, b) => binary_map("sub", v(*a), v(*b), |x, y| x - y)?,
        Op::Mul(a, b) => binary_map("mul", v(*a), v(*b), |x, y| x * y)?,
        Op::LogAddExp(a, b) => {
            if v(*a).shape() != v(*b).shape() {
                return Err(Error::shape("log_add_exp", "operands differ in shape"));
            }
            binary_map("log_add_exp", v(*a), v(*b), numerics::log_add_exp)?
        }
        Op::Neg(a) => v(*a).map(|x| -x),
        Op::Scale(a, c) => v(*a).map(|x| x * c),
        Op::AddScalar(a, c) => v(*a).map(|x| x + c),
        Op::MatMul(a, b) => v(*a).matmul(v(*b))?,
        Op::Affine(x, w, b) => {
            let mut out = v(*x).matmul(v(*w))?;
            let bias = v(*b);
            if bias.rows() != 1 || bias.cols() != out.cols() {
                return Err(Error::shape("affine", alloc::format!("bias {:?}", bias.shape())));
            }
            let cols = out.cols();
            for (i, o) in out.as_mut_slice().iter_mut().enumerate() {
                *o += bias.as_slice()[i % cols];
            }
            out
        }
        Op::Sum(a) => Tensor::scalar(v(*a).as_slice().iter().sum()),
        Op::Mean(a) => {
            let t = v(*a);
            Tensor::scalar(t.as_slice().iter().sum::<f64>() / t.len() as f64)
        }
        Op::SumCols(a) => {
            let t = v(*a);
            Tensor::column((0..t.rows()).map(|r| t.row(r).iter().sum()).collect())
        }
        Op::Exp(a) => v(*a).map(math::exp),
        Op::Log(a) => v(*a).map(math::ln),
        Op::Tanh(a) => v(*a).map(math::tanh),
        Op::Sigmoid(a) => v(*a).map(math::sigmoid),
        Op::Softplus(a) => v(*a).map(math::softplus),
        Op::LogSoftmax(a) => {
            let t = v(*a);
            let mut out = t.clone();
            let cols = t.cols();
            for row in out.as_mut_slice().chunks_mut(cols) {
                let lse = numerics::log_sum_exp(row);
                row.iter_mut().for_each(|x| *x -= lse);
            }
            out
        }
        Op::LogSumExp(a) => {
            let t = v(*a);
            Tensor::column((0..t.rows()).map(|r| numerics::log_sum_exp(t.row(r))).collect())
        }
        Op::Gather(a, idx) => {
            let t = v(*a);
            if idx.len() != t.rows() || idx.iter().any(|&i| i >= t.cols()) {
                return Err(Error::shape("gather", "index count or value out of range"));
            }
            Tensor::column(idx.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect())
        }
        Op::IndexRows(a, idx) => {
            let t = v(*a);
            if idx.iter().any(|&i| i >= t.rows()) {
                return Err(Error::shape("index_rows", "row index out of range"));
            }
            let mut data = Vec::with_capacity(idx.len() * t.cols());
            for &i in idx {
                data.extend_from_slice(t.row(i));
            }
            Tensor::new(idx.len(), t.cols(), data)?
        }
        Op::Concat(parts) => {
            let rows = v(parts[0]).rows();
            if parts.iter().any(|p| v(*p).rows() != rows) {
                return Err(Error::shape("concat", "row counts differ"));
            }
            let cols: usize = parts.iter().map(|p| v(*p).cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(v(*p).row(r));
                }
            }
            Tensor::new(rows, cols, data)?
        }
        Op::Slice(a, start, end) => {
            let t = v(*a);
            if start > end || *end > t.cols() {
                return Err(Error::shape("slice", alloc::format!("{start}..{end} of {}", t.cols())));
            }
            let mut data = Vec::with_capacity(t.rows() * (end - start));
            for r in 0..t.rows() {
                data.extend_from_slice(&t.row(r)[*start..*end]);
            }
            Tensor::new(t.rows(), end - start, data)?
        }
        Op::Reshape(_) => unreachable!("reshape is evaluated with its target shape"),
        Op::RepeatCols(a, m) => {
            let t = v(*a);
            if t.cols() != 1 {
                return Err(Error::shape("repeat_cols", "input must be a column"));
            }
            Tensor::from_fn(t.rows(), *m, |r, _| t.get(r, 0))
        }
        Op::ClampMin(a, lo) => v(*a).map(|x| if x < *lo { *lo } else { x }),
    })
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Param => true,
            other => other.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = {
            let nodes = &self.nodes;
            eval(&op, &|p: Var| &nodes[p.0].value)?
        };
        Ok(self.push(op, value))
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    /// Register a parameter as a gradient-receiving leaf. Repeated calls
    /// with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(Op::Param, store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::AddScalar(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    /// `x * w + b` with `b` a row vector broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.record(Op::Affine(x, w, b))
    }

    /// Sum of all entries, shape `(1, 1)`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Mean(a))
    }

    /// Per-row sums, shape `(rows, 1)`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SumCols(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Softplus(a))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let s = self.sigmoid(a)?;
        self.mul(a, s)
    }

    /// `log sigmoid(x) = -softplus(-x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let n = self.neg(a)?;
        let sp = self.softplus(n)?;
        self.neg(sp)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.record(Op::LogSoftmax(a))
    }

    /// Row-wise log-sum-exp, shape `(rows, 1)`.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::LogSumExp(a))
    }

    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::LogAddExp(a, b))
    }

    /// Pick one column per row, shape `(rows, 1)`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        self.record(Op::Gather(a, idx))
    }

    /// Select rows by index (embedding lookup).
    pub fn index_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        self.record(Op::IndexRows(a, idx))
    }

    /// Concatenate along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no operands"));
        }
        self.record(Op::Concat(parts.to_vec()))
    }

    /// Columns `start..end`.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.record(Op::Slice(a, start, end))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshaped(rows, cols)?;
        Ok(self.push(Op::Reshape(a), value))
    }

    /// Broadcast a column to `m` columns.
    pub fn repeat_cols(&mut self, a: Var, m: usize) -> Result<Var> {
        self.record(Op::RepeatCols(a, m))
    }

    /// `max(x, lo)`; the gradient is passed through where `x > lo`.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var> {
        self.record(Op::ClampMin(a, lo))
    }

    /// Recompute every node from the leaves in creation order.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match &node.op {
                Op::Constant | Op::Param => node.value.clone(),
                Op::Reshape(a) => {
                    let (r, c) = node.value.shape();
                    values[a.0].clone().reshaped(r, c)?
                }
                op => eval(op, &|p: Var| &values[p.0])?,
            };
            values.push(value);
        }
        Ok(values)
    }

    /// First node holding a NaN or infinity, with its operation name.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Propagate gradients from a scalar `loss` to every reachable node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (rows, cols) = self.nodes[loss.0].value.shape();
        if rows * cols != 1 {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, delta: Tensor, grads: &mut [Option<Tensor>]| {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        // Reduce a full-shape gradient to a row-broadcast operand.
        let reduce_to = |delta: Tensor, target: &Tensor| -> Tensor {
            if delta.shape() == target.shape() {
                return delta;
            }
            let cols = delta.cols();
            let mut out = Tensor::zeros(1, cols);
            for (i, d) in delta.as_slice().iter().enumerate() {
                out.as_mut_slice()[i % cols] += d;
            }
            out
        };
        let bcast = |t: &Tensor, i: usize, cols: usize| -> f64 {
            if t.rows() == 1 {
                t.as_slice()[i % cols]
            } else {
                t.as_slice()[i]
            }
        };
        let out = &node.value;

        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone(), grads);
                }
                if needs(*b) {
                    acc(*b, reduce_to(g.clone(), val(*b)), grads);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone(), grads);
                }
                if needs(*b) {
                    acc(*b, reduce_to(g.map(|x| -x), val(*b)), grads);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let cols = g.cols();
                if needs(*a) {
                    let d = Tensor::from_fn(g.rows(), cols, |r, c| {
                        let i = r * cols + c;
                        g.as_slice()[i] * bcast(bv, i, cols)
                    });
                    acc(*a, d, grads);
                }
                if needs(*b) {
                    let d = Tensor::from_fn(g.rows(), cols, |r, c| {
                        let i = r * cols + c;
                        g.as_slice()[i] * av.as_slice()[i]
                    });
                    acc(*b, reduce_to(d, bv), grads);
                }
            }
            Op::LogAddExp(a, b) => {
                // d/da = e^{a - out}, d/db = e^{b - out}
                for p in [*a, *b] {
                    if needs(p) {
                        let pv = val(p);
                        let d = Tensor::from_fn(g.rows(), g.cols(), |r, c| {
                            g.get(r, c) * math::exp(pv.get(r, c) - out.get(r, c))
                        });
                        acc(p, d, grads);
                    }
                }
            }
            Op::Neg(a) => {
                if needs(*a) {
                    acc(*a, g.map(|x| -x), grads);
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    acc(*a, g.map(|x| x * c), grads);
                }
            }
            Op::AddScalar(a, _) => {
                if needs(*a) {
                    acc(*a, g.clone(), grads);
                }
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, grads, &mut acc),
            Op::Affine(x, w, b) => {
                self.matmul_backward(*x, *w, g, grads, &mut acc);
                if needs(*b) {
                    acc(*b, reduce_to(g.clone(), val(*b)), grads);
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let t = val(*a);
                    acc(*a, Tensor::full(t.rows(), t.cols(), g.item()), grads);
                }
            }
            Op::Mean(a) => {
                if needs(*a) {
                    let t = val(*a);
                    acc(*a, Tensor::full(t.rows(), t.cols(), g.item() / t.len() as f64), grads);
                }
            }
            Op::SumCols(a) => {
                if needs(*a) {
                    let t = val(*a);
                    acc(*a, Tensor::from_fn(t.rows(), t.cols(), |r, _| g.get(r, 0)), grads);
                }
            }
            Op::Exp(a) => self.unary(*a, g, out, grads, &mut acc, |_, y| y),
            Op::Log(a) => self.unary(*a, g, out, grads, &mut acc, |x, _| 1.0 / x),
            Op::Tanh(a) => self.unary(*a, g, out, grads, &mut acc, |_, y| 1.0 - y * y),
            Op::Sigmoid(a) => self.unary(*a, g, out, grads, &mut acc, |_, y| y * (1.0 - y)),
            Op::Softplus(a) => self.unary(*a, g, out, grads, &mut acc, |x, _| math::sigmoid(x)),
            Op::ClampMin(a, lo) => {
                let lo = *lo;
                self.unary(*a, g, out, grads, &mut acc, move |x, _| if x > lo { 1.0 } else { 0.0 })
            }
            Op::LogSoftmax(a) => {
                if needs(*a) {
                    // dx = g - softmax * rowsum(g)
                    let cols = out.cols();
                    let mut d = g.clone();
                    for r in 0..out.rows() {
                        let gs: f64 = g.row(r).iter().sum();
                        for c in 0..cols {
                            let i = r * cols + c;
                            d.as_mut_slice()[i] -= math::exp(out.as_slice()[i]) * gs;
                        }
                    }
                    acc(*a, d, grads);
                }
            }
            Op::LogSumExp(a) => {
                if needs(*a) {
                    let t = val(*a);
                    let d = Tensor::from_fn(t.rows(), t.cols(), |r, c| {
                        g.get(r, 0) * math::exp(t.get(r, c) - out.get(r, 0))
                    });
                    acc(*a, d, grads);
                }
            }
            Op::Gather(a, idx) => {
                if needs(*a) {
                    let t = val(*a);
                    let mut d = Tensor::zeros(t.rows(), t.cols());
                    for (r, &c) in idx.iter().enumerate() {
                        d.set(r, c, g.get(r, 0));
                    }
                    acc(*a, d, grads);
                }
            }
            Op::IndexRows(a, idx) => {
                if needs(*a) {
                    let t = val(*a);
                    let mut d = Tensor::zeros(t.rows(), t.cols());
                    let cols = t.cols();
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..cols {
                            let cur = d.get(src, c);
                            d.set(src, c, cur + g.get(r, c));
                        }
                    }
                    acc(*a, d, grads);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if needs(*p) {
                        let d = Tensor::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                        acc(*p, d, grads);
                    }
                    offset += w;
                }
            }
            Op::Slice(a, start, _) => {
                if needs(*a) {
                    let t = val(*a);
                    let mut d = Tensor::zeros(t.rows(), t.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            d.set(r, start + c, g.get(r, c));
                        }
                    }
                    acc(*a, d, grads);
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    let (r, c) = val(*a).shape();
                    let d = g.clone().reshaped(r, c).expect("reshape preserves length");
                    acc(*a, d, grads);
                }
            }
            Op::RepeatCols(a, _) => {
                if needs(*a) {
                    let d = Tensor::column((0..g.rows()).map(|r| g.row(r).iter().sum()).collect());
                    acc(*a, d, grads);
                }
            }
        }
    }

    fn unary(
        &self,
        a: Var,
        g: &Tensor,
        out: &Tensor,
        grads: &mut [Option<Tensor>],
        acc: &mut impl FnMut(Var, Tensor, &mut [Option<Tensor>]),
        deriv: impl Fn(f64, f64) -> f64,
    ) {
        if !self.nodes[a.0].requires_grad {
            return;
        }
        let x = &self.nodes[a.0].value;
        let data = g
            .as_slice()
            .iter()
            .zip(x.as_slice().iter().zip(out.as_slice()))
            .map(|(&gv, (&xv, &yv))| gv * deriv(xv, yv))
            .collect();
        let d = Tensor::new(x.rows(), x.cols(), data).expect("unary gradient shape");
        acc(a, d, grads);
    }

    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        acc: &mut impl FnMut(Var, Tensor, &mut [Option<Tensor>]),
    ) {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        if self.nodes[a.0].requires_grad {
            let mut d = Tensor::zeros(n, k);
            matmul_bt_into(g.as_slice(), bv.as_slice(), d.as_mut_slice(), n, k, m);
            acc(a, d, grads);
        }
        if self.nodes[b.0].requires_grad {
            let mut d = Tensor::zeros(k, m);
            matmul_at_into(av.as_slice(), g.as_slice(), d.as_mut_slice(), n, k, m);
            acc(b, d, grads);
        }
    }
}
