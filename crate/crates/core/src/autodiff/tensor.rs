//! Dense `f64` tensors with a recorded computation graph.
//!
//! Every primitive returns a new [`Tensor`] holding its forward values and a
//! provenance node (the primitive and its inputs). [`Tensor::backward`] walks
//! that graph in reverse topological order and accumulates `d(loss)/d(leaf)`
//! into every leaf that requires a gradient. Intermediate gradients live only
//! for the duration of the backward pass.
//!
//! Broadcasting is deliberately narrow: elementwise ops need identical shapes,
//! and the only broadcast is [`Tensor::add_bias`] (a row vector added to
//! every row of a matrix).

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a tensor. Cloning the handle aliases the same storage; use
/// [`Tensor::deep_copy`] for an independent leaf.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

struct Inner {
    id: u64,
    shape: Vec<usize>,
    values: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    node: Option<Node>,
}

struct Node {
    op: Op,
    inputs: Vec<Tensor>,
}

#[derive(Debug, Clone)]
enum Op {
    Add,
    Sub,
    Mul,
    AddBias,
    MatMul,
    Transpose,
    Reshape,
    Scale(f64),
    AddScalar,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Exp,
    Log,
    ClampMin(f64),
    Sum,
    Mean,
    SumAxis(usize),
    MeanAxis(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Gather(Vec<usize>),
    SegmentMean(Vec<usize>),
    Concat(usize),
    PairwiseSqDist,
    GradReverse(f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddBias => "add_bias",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::ClampMin(_) => "clamp_min",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumAxis(_) => "sum_axis",
            Op::MeanAxis(_) => "mean_axis",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Gather(_) => "gather_rows",
            Op::SegmentMean(_) => "segment_mean",
            Op::Concat(_) => "concat",
            Op::PairwiseSqDist => "pairwise_sq_dist",
            Op::GradReverse(_) => "grad_reverse",
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    fn build(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel(&shape), values.len());
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            values: RefCell::new(values),
            grad: RefCell::new(None),
            requires_grad: Cell::new(requires_grad),
            node,
        }))
    }

    fn checked_leaf(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<Self> {
        if numel(&shape) != values.len() {
            return Err(Error::invalid(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel(&shape),
                values.len()
            )));
        }
        Ok(Self::build(shape, values, requires_grad, None))
    }

    /// Constant leaf (no gradient).
    pub fn new(shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Self> {
        Self::checked_leaf(shape.into(), values, false)
    }

    /// Trainable leaf.
    pub fn param(shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Self> {
        Self::checked_leaf(shape.into(), values, true)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(Vec::new(), vec![value], false, None)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::build(shape, vec![0.0; n], false, None)
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self::build(vec![values.len()], values, false, None)
    }

    fn from_op(op: Op, inputs: Vec<Tensor>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        let requires_grad = inputs.iter().any(Tensor::requires_grad);
        Self::build(shape, values, requires_grad, Some(Node { op, inputs }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        self.0.values.borrow()
    }

    /// Mutable access to a leaf's values, for optimizers and checkpoint loads.
    ///
    /// Panics when called on a non-leaf: rewriting a recorded activation would
    /// silently desynchronise the graph.
    pub fn values_mut(&self) -> RefMut<'_, Vec<f64>> {
        assert!(self.is_leaf(), "values_mut on a non-leaf tensor");
        self.0.values.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.values();
        assert_eq!(v.len(), 1, "item() on tensor of shape {:?}", self.shape());
        v[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    /// Gradient, or zeros when nothing has been accumulated yet.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub(crate) fn grad_mut(&self) -> RefMut<'_, Option<Vec<f64>>> {
        self.0.grad.borrow_mut()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    /// Toggles gradient tracking on a leaf. Graphs built afterwards respect
    /// the new flag; already-recorded nodes keep theirs.
    pub fn set_requires_grad(&self, flag: bool) {
        assert!(self.is_leaf(), "set_requires_grad on a non-leaf tensor");
        self.0.requires_grad.set(flag);
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// New constant leaf with the same values; gradients stop here.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.to_vec(), false, None)
    }

    /// Independent leaf with copied values and the same `requires_grad` flag.
    pub fn deep_copy(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.to_vec(), self.requires_grad(), None)
    }

    fn shape_err(&self, op: &'static str, others: &[&Tensor]) -> Error {
        let mut shapes = vec![self.shape().to_vec()];
        shapes.extend(others.iter().map(|t| t.shape().to_vec()));
        Error::Shape { op, shapes }
    }

    fn rank2(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape() {
            [r, c] => Ok((r, c)),
            _ => Err(self.shape_err(op, &[])),
        }
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.shape().len() {
            return Err(self.shape_err(op, &[]));
        }
        let split = axis_split(self.shape(), axis);
        if split.1 == 0 {
            return Err(Error::EmptyAxis {
                op,
                shape: self.shape().to_vec(),
            });
        }
        Ok(split)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let values = self.values().iter().map(|&x| f(x)).collect();
        Tensor::from_op(op, vec![self.clone()], self.shape().to_vec(), values)
    }

    fn zip_same(&self, other: &Tensor, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(self.shape_err(op.name(), &[other]));
        }
        let values = self
            .values()
            .iter()
            .zip(other.values().iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_op(
            op,
            vec![self.clone(), other.clone()],
            self.shape().to_vec(),
            values,
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same(other, Op::Sub, |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same(other, Op::Mul, |a, b| a * b)
    }

    /// `[rows, n] + [n]`, adding the vector to every row.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.rank2("add_bias")?;
        if bias.shape() != [cols] {
            return Err(self.shape_err("add_bias", &[bias]));
        }
        let x = self.values();
        let b = bias.values();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            out.extend(x[r * cols..(r + 1) * cols].iter().zip(b.iter()).map(|(a, c)| a + c));
        }
        drop((x, b));
        Ok(Tensor::from_op(
            Op::AddBias,
            vec![self.clone(), bias.clone()],
            vec![rows, cols],
            out,
        ))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.rank2("matmul")?;
        let (k2, m) = other.rank2("matmul").map_err(|_| self.shape_err("matmul", &[other]))?;
        if k != k2 {
            return Err(self.shape_err("matmul", &[other]));
        }
        let out = kernels::matmul(&self.values(), &other.values(), n, k, m);
        Ok(Tensor::from_op(
            Op::MatMul,
            vec![self.clone(), other.clone()],
            vec![n, m],
            out,
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.rank2("transpose")?;
        let out = kernels::transpose(&self.values(), r, c);
        Ok(Tensor::from_op(Op::Transpose, vec![self.clone()], vec![c, r], out))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                shapes: vec![self.shape().to_vec(), shape],
            });
        }
        Ok(Tensor::from_op(Op::Reshape, vec![self.clone()], shape, self.to_vec()))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Op::Scale(c), |x| c * x)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(Op::AddScalar, |x| x + c)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn leaky_relu(&self, alpha: f64) -> Tensor {
        self.unary(Op::LeakyRelu(alpha), |x| if x > 0.0 { x } else { alpha * x })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::EmptyAxis {
                op: "log",
                shape: self.shape().to_vec(),
            });
        }
        Ok(self.unary(Op::Log, f64::ln))
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&self, floor: f64) -> Tensor {
        self.unary(Op::ClampMin(floor), |x| x.max(floor))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Tensor {
        let s = self.values().iter().sum();
        Tensor::from_op(Op::Sum, vec![self.clone()], Vec::new(), vec![s])
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::EmptyAxis {
                op: "mean",
                shape: self.shape().to_vec(),
            });
        }
        let s: f64 = self.values().iter().sum();
        Ok(Tensor::from_op(
            Op::Mean,
            vec![self.clone()],
            Vec::new(),
            vec![s / n as f64],
        ))
    }

    fn reduce_axis(&self, axis: usize, op: Op, divide: bool) -> Result<Tensor> {
        let (outer, len, inner) = self.check_axis(op.name(), axis)?;
        let x = self.values();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        if divide {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(op, vec![self.clone()], shape, out))
    }

    /// Sum over one axis; that axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, Op::SumAxis(axis), false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, Op::MeanAxis(axis), true)
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let split = self.check_axis("softmax", axis)?;
        let out = kernels::log_softmax(&self.values(), split)
            .into_iter()
            .map(f64::exp)
            .collect();
        Ok(Tensor::from_op(
            Op::Softmax(axis),
            vec![self.clone()],
            self.shape().to_vec(),
            out,
        ))
    }

    /// `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let split = self.check_axis("log_softmax", axis)?;
        let out = kernels::log_softmax(&self.values(), split);
        Ok(Tensor::from_op(
            Op::LogSoftmax(axis),
            vec![self.clone()],
            self.shape().to_vec(),
            out,
        ))
    }

    /// Row lookup into a `[rows, width]` table: output is `[ids.len(), width]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let (rows, width) = self.rank2("gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "gather_rows: id {bad} out of range for table with {rows} rows"
            )));
        }
        let table = self.values();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&table[i * width..(i + 1) * width]);
        }
        drop(table);
        Ok(Tensor::from_op(
            Op::Gather(ids.to_vec()),
            vec![self.clone()],
            vec![ids.len(), width],
            out,
        ))
    }

    /// Mean of contiguous row segments. `offsets` has one more entry than the
    /// number of segments; segment `s` covers rows `offsets[s]..offsets[s+1]`.
    pub fn segment_mean(&self, offsets: &[usize]) -> Result<Tensor> {
        let (rows, width) = self.rank2("segment_mean")?;
        if offsets.len() < 2
            || offsets[0] != 0
            || *offsets.last().unwrap() != rows
            || offsets.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::invalid(format!(
                "segment_mean: offsets must rise strictly from 0 to {rows}"
            )));
        }
        let x = self.values();
        let segments = offsets.len() - 1;
        let mut out = vec![0.0; segments * width];
        for s in 0..segments {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            let dst = &mut out[s * width..(s + 1) * width];
            for r in lo..hi {
                for (d, v) in dst.iter_mut().zip(&x[r * width..(r + 1) * width]) {
                    *d += v;
                }
            }
            let n = (hi - lo) as f64;
            dst.iter_mut().for_each(|d| *d /= n);
        }
        drop(x);
        Ok(Tensor::from_op(
            Op::SegmentMean(offsets.to_vec()),
            vec![self.clone()],
            vec![segments, width],
            out,
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(first.shape_err("concat", &[]));
        }
        for p in &parts[1..] {
            let compatible = p.shape().len() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                let others: Vec<&Tensor> = parts[1..].iter().collect();
                return Err(first.shape_err("concat", &others));
            }
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = p.shape()[axis];
                let v = p.values();
                out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(Op::Concat(axis), parts.to_vec(), shape, out))
    }

    /// Squared Euclidean distances between the rows of `self` `[n, d]` and
    /// `other` `[m, d]`, as an `[n, m]` matrix.
    pub fn pairwise_sq_dist(&self, other: &Tensor) -> Result<Tensor> {
        let (n, d) = self.rank2("pairwise_sq_dist")?;
        let (m, d2) = other
            .rank2("pairwise_sq_dist")
            .map_err(|_| self.shape_err("pairwise_sq_dist", &[other]))?;
        if d != d2 {
            return Err(self.shape_err("pairwise_sq_dist", &[other]));
        }
        let a = self.values();
        let b = other.values();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let ai = &a[i * d..(i + 1) * d];
            for j in 0..m {
                let bj = &b[j * d..(j + 1) * d];
                out.push(ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        drop((a, b));
        Ok(Tensor::from_op(
            Op::PairwiseSqDist,
            vec![self.clone(), other.clone()],
            vec![n, m],
            out,
        ))
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `-lambda` in the backward pass.
    pub fn grad_reverse(&self, lambda: f64) -> Tensor {
        self.unary(Op::GradReverse(lambda), |x| x)
    }

    /// Accumulates `d(self)/d(leaf)` into every reachable leaf with
    /// `requires_grad`. Gradients add onto whatever the leaves already hold;
    /// call [`Tensor::zero_grad`] between independent steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            let Some(node) = &t.0.node else {
                let mut slot = t.grad_mut();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
                continue;
            };
            let input_grads = node.backward(t, &g);
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !input.requires_grad() {
                    continue;
                }
                match pending.get_mut(&input.id()) {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    None => {
                        pending.insert(input.id(), ig);
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the gradient-carrying subgraph rooted at `self`.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for input in &node.inputs {
                    if input.requires_grad() && !seen.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl Node {
    /// Vector-Jacobian products for each input, given the output tensor and
    /// the gradient flowing into it.
    fn backward(&self, out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let inputs = &self.inputs;
        let x = || inputs[0].values();
        let y = || out.values();
        let map_x = |f: &dyn Fn(f64, f64) -> f64| -> Vec<Option<Vec<f64>>> {
            let xv = x();
            vec![Some(xv.iter().zip(g).map(|(&a, &b)| f(a, b)).collect())]
        };
        match &self.op {
            Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            Op::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
            Op::Mul => {
                let a = inputs[0].values();
                let b = inputs[1].values();
                let ga = g.iter().zip(b.iter()).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(a.iter()).map(|(g, a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            }
            Op::AddBias => {
                let cols = inputs[1].numel();
                let mut gb = vec![0.0; cols];
                for row in g.chunks(cols) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![Some(g.to_vec()), Some(gb)]
            }
            Op::MatMul => {
                let (n, k) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                let m = inputs[1].shape()[1];
                let a = inputs[0].values();
                let b = inputs[1].values();
                let ga = inputs[0].requires_grad().then(|| kernels::matmul_nt(g, &b, n, m, k));
                let gb = inputs[1].requires_grad().then(|| kernels::matmul_tn(&a, g, n, k, m));
                vec![ga, gb]
            }
            Op::Transpose => {
                let (r, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                vec![Some(kernels::transpose(g, c, r))]
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::Scale(c) => vec![Some(g.iter().map(|v| c * v).collect())],
            Op::AddScalar => vec![Some(g.to_vec())],
            Op::Relu => map_x(&|x, g| if x > 0.0 { g } else { 0.0 }),
            Op::LeakyRelu(alpha) => map_x(&|x, g| if x > 0.0 { g } else { alpha * g }),
            Op::Sigmoid => {
                let yv = y();
                vec![Some(yv.iter().zip(g).map(|(&s, &g)| g * s * (1.0 - s)).collect())]
            }
            Op::Exp => {
                let yv = y();
                vec![Some(yv.iter().zip(g).map(|(&e, &g)| g * e).collect())]
            }
            Op::Log => map_x(&|x, g| g / x),
            Op::ClampMin(floor) => map_x(&|x, g| if x > *floor { g } else { 0.0 }),
            Op::Sum => vec![Some(vec![g[0]; inputs[0].numel()])],
            Op::Mean => {
                let n = inputs[0].numel();
                vec![Some(vec![g[0] / n as f64; n])]
            }
            Op::SumAxis(axis) | Op::MeanAxis(axis) => {
                let (outer, len, inner) = axis_split(inputs[0].shape(), *axis);
                let scale = match self.op {
                    Op::MeanAxis(_) => 1.0 / len as f64,
                    _ => 1.0,
                };
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            gx[(o * len + k) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::Softmax(axis) => {
                let split = axis_split(inputs[0].shape(), *axis);
                let yv = y();
                // dx = y * (g - <g, y>) along the axis
                let dots = kernels::axis_dot(g, &yv, split);
                vec![Some(kernels::axis_map(split, |idx, line| {
                    yv[idx] * (g[idx] - dots[line])
                }))]
            }
            Op::LogSoftmax(axis) => {
                let split = axis_split(inputs[0].shape(), *axis);
                let yv = y();
                // dx = g - softmax * sum(g) along the axis
                let ones = vec![1.0; g.len()];
                let sums = kernels::axis_dot(g, &ones, split);
                vec![Some(kernels::axis_map(split, |idx, line| {
                    g[idx] - yv[idx].exp() * sums[line]
                }))]
            }
            Op::Gather(ids) => {
                let width = inputs[0].shape()[1];
                let mut gt = vec![0.0; inputs[0].numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * width..(id + 1) * width];
                    dst.iter_mut()
                        .zip(&g[r * width..(r + 1) * width])
                        .for_each(|(a, b)| *a += b);
                }
                vec![Some(gt)]
            }
            Op::SegmentMean(offsets) => {
                let width = inputs[0].shape()[1];
                let mut gx = vec![0.0; inputs[0].numel()];
                for (s, w) in offsets.windows(2).enumerate() {
                    let inv = 1.0 / (w[1] - w[0]) as f64;
                    let src = &g[s * width..(s + 1) * width];
                    for r in w[0]..w[1] {
                        gx[r * width..(r + 1) * width]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a = b * inv);
                    }
                }
                vec![Some(gx)]
            }
            Op::Concat(axis) => {
                let (outer, _, inner) = axis_split(out.shape(), *axis);
                let total = out.shape()[*axis];
                let mut offset = 0;
                let mut grads = Vec::with_capacity(inputs.len());
                for p in inputs {
                    let len = p.shape()[*axis];
                    let mut gp = Vec::with_capacity(p.numel());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[start..start + len * inner]);
                    }
                    offset += len;
                    grads.push(Some(gp));
                }
                grads
            }
            Op::PairwiseSqDist => {
                let (n, d) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                let m = inputs[1].shape()[0];
                let a = inputs[0].values();
                let b = inputs[1].values();
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let gij = 2.0 * g[i * m + j];
                        for c in 0..d {
                            let diff = a[i * d + c] - b[j * d + c];
                            ga[i * d + c] += gij * diff;
                            gb[j * d + c] -= gij * diff;
                        }
                    }
                }
                vec![Some(ga), Some(gb)]
            }
            Op::GradReverse(lambda) => vec![Some(g.iter().map(|v| -lambda * v).collect())],
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.values();
        let preview: Vec<f64> = v.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("values", &preview)
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.0.node.as_ref().map(|n| n.op.name()))
            .finish()
    }
}

mod kernels {
    /// `[n, k] x [k, m]`.
    pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut c = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut c[i * m..(i + 1) * m];
            for p in 0..k {
                let av = a[i * k + p];
                let brow = &b[p * m..(p + 1) * m];
                row.iter_mut().zip(brow).for_each(|(c, b)| *c += av * b);
            }
        }
        c
    }

    /// `g [n, m] x b^T` where `b` is `[k, m]`: result `[n, k]`.
    pub fn matmul_nt(g: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let grow = &g[i * m..(i + 1) * m];
            for p in 0..k {
                let brow = &b[p * m..(p + 1) * m];
                out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// `a^T x g` where `a` is `[n, k]`, `g` is `[n, m]`: result `[k, m]`.
    pub fn matmul_tn(a: &[f64], g: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; k * m];
        for i in 0..n {
            let grow = &g[i * m..(i + 1) * m];
            for p in 0..k {
                let av = a[i * k + p];
                out[p * m..(p + 1) * m]
                    .iter_mut()
                    .zip(grow)
                    .for_each(|(o, g)| *o += av * g);
            }
        }
        out
    }

    pub fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        out
    }

    pub fn log_softmax(x: &[f64], (outer, len, inner): (usize, usize, usize)) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|k| (x[at(k)] - max).exp()).sum::<f64>().ln();
                for k in 0..len {
                    out[at(k)] = x[at(k)] - lse;
                }
            }
        }
        out
    }

    /// Per-line dot products along the axis; one entry per (outer, inner) line.
    pub fn axis_dot(a: &[f64], b: &[f64], (outer, len, inner): (usize, usize, usize)) -> Vec<f64> {
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    let idx = (o * len + k) * inner + i;
                    out[o * inner + i] += a[idx] * b[idx];
                }
            }
        }
        out
    }

    /// Builds a full-size buffer from `f(flat index, line index)`.
    pub fn axis_map((outer, len, inner): (usize, usize, usize), f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    let idx = (o * len + k) * inner + i;
                    out[idx] = f(idx, o * inner + i);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let z = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(z.softmax(0).unwrap().to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(Tensor::scalar(0.0).sigmoid().item(), 0.5);
    }

    #[test]
    fn leaky_relu_negative_slope() {
        let y = Tensor::scalar(-2.0).leaky_relu(0.01).item();
        assert_abs_diff_eq!(y, -0.02, epsilon = 1e-15);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::param([3], vec![1.0, 2.0, 3.0]).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let x = Tensor::param([2], vec![1.0, -1.0]).unwrap();
        let loss = x.scale(3.0).sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, 6.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::param([2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(x.relu().backward(), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn off_path_leaves_get_no_gradient() {
        let a = Tensor::param([2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::param([2], vec![3.0, 4.0]).unwrap();
        let _unused = b.exp();
        a.sum().backward().unwrap();
        assert!(b.grad().is_none());
    }

    #[test]
    fn detach_blocks_gradient() {
        let a = Tensor::param([2], vec![1.0, 2.0]).unwrap();
        let loss = a.detach().mul(&a).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_primitive() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn empty_softmax_axis_rejected() {
        let z = Tensor::zeros([3, 0]);
        assert!(matches!(z.softmax(1), Err(Error::EmptyAxis { .. })));
        assert!(matches!(z.log_softmax(1), Err(Error::EmptyAxis { .. })));
        assert!(matches!(Tensor::zeros([0]).log(), Err(Error::EmptyAxis { .. })));
    }

    #[test]
    fn log_softmax_handles_large_logits() {
        let z = Tensor::vector(vec![1000.0, 0.0]);
        let ls = z.log_softmax(0).unwrap().to_vec();
        assert_abs_diff_eq!(ls[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ls[1], -1000.0, epsilon = 1e-9);
    }

    #[test]
    fn softmax_along_rows_and_columns() {
        let z = Tensor::new([2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        for v in z.softmax(1).unwrap().to_vec() {
            assert_abs_diff_eq!(v, 0.5, epsilon = 1e-15);
        }
        let cols = z.softmax(0).unwrap().to_vec();
        assert_abs_diff_eq!(cols[0] + cols[2], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn concat_and_segment_mean() {
        let a = Tensor::new([1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new([2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = Tensor::concat(&[a, b], 0).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        let m = c.segment_mean(&[0, 1, 3]).unwrap();
        assert_eq!(m.to_vec(), vec![1.0, 2.0, 4.0, 5.0]);
        assert!(c.segment_mean(&[0, 2, 2, 3]).is_err());
    }

    #[test]
    fn gather_out_of_range() {
        let t = Tensor::zeros([4, 2]);
        assert!(t.gather_rows(&[0, 4]).is_err());
    }

    #[test]
    fn grad_reverse_is_identity_forward() {
        let x = Tensor::param([2], vec![0.3, -0.7]).unwrap();
        let y = x.grad_reverse(0.5);
        assert_eq!(y.to_vec(), x.to_vec());
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![-0.5, -0.5]);
    }

    #[test]
    fn deep_copy_does_not_alias() {
        let x = Tensor::param([2], vec![1.0, 2.0]).unwrap();
        let y = x.deep_copy();
        y.values_mut()[0] = 9.0;
        assert_eq!(x.to_vec(), vec![1.0, 2.0]);
        assert!(y.requires_grad());
    }
}
