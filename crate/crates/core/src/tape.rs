//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] records every operation of one forward pass in execution
//! order, which is already a topological order of the graph. Parameters are
//! read from a borrowed [`ParamStore`]; [`Tape::backward`] consumes the tape
//! and returns a [`Gradients`] record that the caller folds back into the
//! store. A tape is therefore single-use: build, backward, drop.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation kinds exposed through [`Tape::forward_op`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Relu,
    Elu,
    Tanh,
    Sigmoid,
    Softmax,
    Abs,
    Concat,
    Slice { start: usize, end: usize },
    Mean,
    Mse,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Elu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    Clamp(Var, T, T),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Mean(Var),
    Sum(Var),
    Mse(Var, Var),
    SumCols(Var),
    GatherCols(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    BatchedMatVec(Var, Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients<T: Scalar> {
    params: BTreeMap<String, Vec<T>>,
    leaves: HashMap<Var, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.params.get(name).map(Vec::as_slice)
    }

    /// Gradient of a non-parameter leaf created with `requires_grad`.
    pub fn leaf(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(&v).map(Vec::as_slice)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Adds every parameter gradient into the matching store entry.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (name, g) in &self.params {
            store.get_mut(name)?.accumulate_grad(g)?;
        }
        Ok(())
    }
}

pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore<T>>,
    param_vars: HashMap<String, Var>,
    grad_enabled: bool,
    check_finite: bool,
}

impl<'p, T: Scalar> Tape<'p, T> {
    /// Tape without parameters; leaves are supplied explicitly.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: None,
            param_vars: HashMap::new(),
            grad_enabled: true,
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Tape { params: Some(params), ..Tape::new() }
    }

    /// Tape that never records gradients; parameters are plain constants.
    pub fn no_grad(params: &'p ParamStore<T>) -> Self {
        Tape { params: Some(params), grad_enabled: false, ..Tape::new() }
    }

    /// Rejects NaN/Inf in every op output when enabled. On by default in
    /// debug builds.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &str) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds a leaf. It receives a gradient iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad && self.grad_enabled;
        let mut t = t;
        t.grad = None;
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: rg });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf (never differentiated).
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Leaf bound to a named parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let store = self.params.ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let mut t = store.get(name)?.clone();
        t.grad = None;
        t.requires_grad = self.grad_enabled;
        let v = self.leaf(t);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Dispatches one of the primitive kinds by name.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::Shape { op: "forward_op", shapes: vec![vec![n], vec![inputs.len()]] })
            }
        };
        match kind {
            OpKind::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Relu => arity(1).and_then(|_| self.relu(inputs[0])),
            OpKind::Elu => arity(1).and_then(|_| self.elu(inputs[0])),
            OpKind::Tanh => arity(1).and_then(|_| self.tanh(inputs[0])),
            OpKind::Sigmoid => arity(1).and_then(|_| self.sigmoid(inputs[0])),
            OpKind::Softmax => arity(1).and_then(|_| self.softmax(inputs[0])),
            OpKind::Abs => arity(1).and_then(|_| self.abs(inputs[0])),
            OpKind::Concat => self.concat(inputs),
            OpKind::Slice { start, end } => arity(1).and_then(|_| self.slice(inputs[0], start, end)),
            OpKind::Mean => arity(1).and_then(|_| self.mean(inputs[0])),
            OpKind::Mse => arity(2).and_then(|_| self.mse(inputs[0], inputs[1])),
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        t.dims2().ok_or_else(|| Error::shape(op, &[t.shape()]))
    }

    // ---- binary -----------------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &[self.shape(a), self.shape(b)]));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(self.value(a).values(), self.value(b).values(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// Checks `b` against `a` for an elementwise binary op: equal shapes, or
    /// `b` a single row broadcast over the rows of a rank-2 `a`.
    fn broadcast_ok(&self, a: Var, b: Var, op: &'static str) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(false);
        }
        if let [_, n] = sa {
            let row = matches!(sb, [m] if m == n) || matches!(sb, [1, m] if m == n);
            if row {
                return Ok(true);
            }
        }
        Err(Error::shape(op, &[sa, sb]))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let bc = self.broadcast_ok(a, b, name)?;
        let av = self.value(a);
        let bv = self.value(b).values();
        let out: Vec<T> = if bc {
            let n = bv.len();
            av.values().chunks(n).flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| f(x, y))).collect()
        } else {
            av.values().iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        };
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&shape, out)?, op, rg, name)
    }

    /// Elementwise sum; `b` may be a row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("minimum", &[self.shape(a), self.shape(b)]));
        }
        self.binary(a, b, "minimum", |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mse", &[self.shape(a), self.shape(b)]));
        }
        let (av, bv) = (self.value(a).values(), self.value(b).values());
        let n = T::from_usize(av.len().max(1)).unwrap();
        let s: T = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg, "mse")
    }

    // ---- unary ------------------------------------------------------------

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let av = self.value(a);
        let out: Vec<T> = av.values().iter().map(|&x| f(x)).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, out)?, op, rg, name)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, "scale", |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, "add_scalar", |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "elu", |x| if x > T::zero() { x } else { x.exp_m1() }, Op::Elu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "softplus", kernels::softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "exp", |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "log", |x| x.ln(), Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "abs", |x| x.abs(), Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "square", |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(a, "clamp", |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.dims2(a, "softmax")?;
        let av = self.value(a);
        let mut out = av.values().to_vec();
        out.chunks_mut(n).for_each(kernels::softmax_in_place);
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, out)?, Op::Softmax(a), rg, "softmax")
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.dims2(a, "log_softmax")?;
        let av = self.value(a);
        let mut out = av.values().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|x| *x = *x - lse);
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, out)?, Op::LogSoftmax(a), rg, "log_softmax")
    }

    // ---- structural -------------------------------------------------------

    /// Concatenates rank-2 inputs with equal row counts along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", &[]));
        }
        let dims: Vec<(usize, usize)> =
            parts.iter().map(|&p| self.dims2(p, "concat")).collect::<Result<_>>()?;
        let m = dims[0].0;
        if dims.iter().any(|d| d.0 != m) {
            let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
            return Err(Error::shape("concat", &shapes));
        }
        let n: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.value(p).values()[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(&[m, n], out)?, Op::Concat(parts.to_vec()), rg, "concat")
    }

    /// Columns `start..end` of a rank-2 input.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice")?;
        if start >= end || end > n {
            return Err(Error::shape("slice", &[self.shape(a), &[start, end]]));
        }
        let av = self.value(a).values();
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&av[r * n + start..r * n + end]);
        }
        let rg = self.rg(a);
        self.push(Tensor::new(&[m, w], out)?, Op::Slice(a, start, end), rg, "slice")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg, "reshape")
    }

    /// Mean over all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a).values();
        let n = T::from_usize(av.len().max(1)).unwrap();
        let s: T = av.iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s / n), Op::Mean(a), rg, "mean")
    }

    /// Sum over all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).values().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    /// Row sums: `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "sum_cols")?;
        let out: Vec<T> = self.value(a).values().chunks(n).map(|r| r.iter().copied().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::new(&[m, 1], out)?, Op::SumCols(a), rg, "sum_cols")
    }

    /// Picks column `idx[r]` from each row `r`: `[m, n] -> [m, 1]`.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(a, "gather_cols")?;
        if idx.len() != m || idx.iter().any(|&i| i >= n) {
            return Err(Error::shape("gather_cols", &[self.shape(a), &[idx.len()]]));
        }
        let av = self.value(a).values();
        let out: Vec<T> = idx.iter().enumerate().map(|(r, &c)| av[r * n + c]).collect();
        let rg = self.rg(a);
        self.push(Tensor::new(&[m, 1], out)?, Op::GatherCols(a, idx.to_vec()), rg, "gather_cols")
    }

    /// Selects rows by index (repeats allowed): `[m, n] -> [len(idx), n]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(a, "gather_rows")?;
        if idx.iter().any(|&i| i >= m) {
            return Err(Error::shape("gather_rows", &[self.shape(a), &[idx.len()]]));
        }
        let av = self.value(a).values();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &r in idx {
            out.extend_from_slice(&av[r * n..(r + 1) * n]);
        }
        let rg = self.rg(a);
        self.push(Tensor::new(&[idx.len(), n], out)?, Op::GatherRows(a, idx.to_vec()), rg, "gather_rows")
    }

    /// Per-row vector-matrix product. Row `r` of `w` holds a row-major
    /// `[p, q]` matrix `W_r`; output row `r` is `x_r W_r`.
    /// Shapes: `x [m, p]`, `w [m, p*q]` -> `[m, q]`.
    pub fn batched_matvec(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, p) = self.dims2(x, "batched_matvec")?;
        let (mw, pq) = self.dims2(w, "batched_matvec")?;
        if m != mw || p == 0 || pq % p != 0 {
            return Err(Error::shape("batched_matvec", &[self.shape(x), self.shape(w)]));
        }
        let q = pq / p;
        let (xv, wv) = (self.value(x).values(), self.value(w).values());
        let mut out = vec![T::zero(); m * q];
        for r in 0..m {
            let o = &mut out[r * q..(r + 1) * q];
            for k in 0..p {
                let xk = xv[r * p + k];
                let wrow = &wv[r * pq + k * q..r * pq + (k + 1) * q];
                o.iter_mut().zip(wrow).for_each(|(a, &b)| *a += xk * b);
            }
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(Tensor::new(&[m, q], out)?, Op::BatchedMatVec(x, w), rg, "batched_matvec")
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.value(loss);
        if ls.len() != 1 {
            return Err(Error::NonScalarLoss(ls.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }

        let mut out = Gradients::default();
        let param_nodes: HashMap<usize, &String> = self.param_vars.iter().map(|(k, v)| (v.0, k)).collect();
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            match param_nodes.get(&i) {
                Some(name) => {
                    out.params.insert((*name).clone(), g);
                }
                None => {
                    out.leaves.insert(Var(i), g);
                }
            }
        }
        // Every trainable parameter touched by the pass receives a gradient,
        // even when it was not on the path to the loss.
        for (name, v) in &self.param_vars {
            if self.nodes[v.0].requires_grad && v.0 <= loss.0 {
                out.params.entry(name.clone()).or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.values();
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, f: &dyn Fn(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        let xval = |v: Var| self.nodes[v.0].value.values();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let (_, n) = self.value(*b).dims2().unwrap();
                acc(grads, *a, &|ga| kernels::matmul_bt_acc(g, xval(*b), ga, m, n, k));
                acc(grads, *b, &|gb| kernels::matmul_at_acc(xval(*a), g, gb, m, k, n));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                acc(grads, *a, &|ga| ga.iter_mut().zip(g).for_each(|(s, &d)| *s += d));
                let nb = self.value(*b).len();
                acc(grads, *b, &|gb| {
                    for row in g.chunks(nb) {
                        for (s, &d) in gb.iter_mut().zip(row) {
                            if neg {
                                *s -= d
                            } else {
                                *s += d
                            }
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (xval(*a), xval(*b));
                let nb = bv.len();
                acc(grads, *a, &|ga| {
                    for (j, (s, &d)) in ga.iter_mut().zip(g).enumerate() {
                        *s += d * bv[j % nb];
                    }
                });
                acc(grads, *b, &|gb| {
                    for (j, (&d, &x)) in g.iter().zip(av).enumerate() {
                        gb[j % nb] += d * x;
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (xval(*a), xval(*b));
                acc(grads, *a, &|ga| {
                    for j in 0..ga.len() {
                        if av[j] <= bv[j] {
                            ga[j] += g[j];
                        }
                    }
                });
                acc(grads, *b, &|gb| {
                    for j in 0..gb.len() {
                        if av[j] > bv[j] {
                            gb[j] += g[j];
                        }
                    }
                });
            }
            Op::Scale(a, c) => acc(grads, *a, &|ga| ga.iter_mut().zip(g).for_each(|(s, &d)| *s += d * *c)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(grads, *a, &|ga| ga.iter_mut().zip(g).for_each(|(s, &d)| *s += d))
            }
            Op::Relu(a) => acc(grads, *a, &|ga| {
                for ((s, &d), &yv) in ga.iter_mut().zip(g).zip(y) {
                    if yv > T::zero() {
                        *s += d;
                    }
                }
            }),
            Op::Elu(a) => {
                let xv = xval(*a);
                acc(grads, *a, &|ga| {
                    for j in 0..ga.len() {
                        let dy = if xv[j] > T::zero() { T::one() } else { y[j] + T::one() };
                        ga[j] += g[j] * dy;
                    }
                })
            }
            Op::Tanh(a) => acc(grads, *a, &|ga| {
                for ((s, &d), &yv) in ga.iter_mut().zip(g).zip(y) {
                    *s += d * (T::one() - yv * yv);
                }
            }),
            Op::Sigmoid(a) => acc(grads, *a, &|ga| {
                for ((s, &d), &yv) in ga.iter_mut().zip(g).zip(y) {
                    *s += d * yv * (T::one() - yv);
                }
            }),
            Op::Softplus(a) => {
                let xv = xval(*a);
                acc(grads, *a, &|ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * kernels::sigmoid(xv[j]);
                    }
                })
            }
            Op::Exp(a) => acc(grads, *a, &|ga| {
                for ((s, &d), &yv) in ga.iter_mut().zip(g).zip(y) {
                    *s += d * yv;
                }
            }),
            Op::Log(a) => {
                let xv = xval(*a);
                acc(grads, *a, &|ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] / xv[j];
                    }
                })
            }
            Op::Abs(a) => {
                let xv = xval(*a);
                acc(grads, *a, &|ga| {
                    for j in 0..ga.len() {
                        let s = if xv[j] > T::zero() {
                            T::one()
                        } else if xv[j] < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        ga[j] += g[j] * s;
                    }
                })
            }
            Op::Square(a) => {
                let xv = xval(*a);
                let two = T::lit(2.0);
                acc(grads, *a, &|ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * two * xv[j];
                    }
                })
            }
            Op::Clamp(a, lo, hi) => {
                let xv = xval(*a);
                acc(grads, *a, &|ga| {
                    for j in 0..ga.len() {
                        if xv[j] >= *lo && xv[j] <= *hi {
                            ga[j] += g[j];
                        }
                    }
                })
            }
            Op::Softmax(a) => {
                let (_, n) = self.value(*a).dims2().unwrap();
                acc(grads, *a, &|ga| {
                    for ((gr, yr), sr) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&d, &p)| d * p).sum();
                        for j in 0..n {
                            sr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let (_, n) = self.value(*a).dims2().unwrap();
                acc(grads, *a, &|ga| {
                    for ((gr, yr), sr) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let total: T = gr.iter().copied().sum();
                        for j in 0..n {
                            sr[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                })
            }
            Op::Concat(parts) => {
                let (m, n) = node.value.dims2().unwrap();
                let mut off = 0;
                for &p in parts {
                    let (_, c) = self.value(p).dims2().unwrap();
                    acc(grads, p, &|gp| {
                        for r in 0..m {
                            let src = &g[r * n + off..r * n + off + c];
                            gp[r * c..(r + 1) * c].iter_mut().zip(src).for_each(|(s, &d)| *s += d);
                        }
                    });
                    off += c;
                }
            }
            Op::Slice(a, start, end) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                let w = end - start;
                acc(grads, *a, &|ga| {
                    for r in 0..m {
                        let dst = &mut ga[r * n + start..r * n + end];
                        dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(s, &d)| *s += d);
                    }
                })
            }
            Op::Mean(a) => {
                let n = T::from_usize(self.value(*a).len().max(1)).unwrap();
                let d = g[0] / n;
                acc(grads, *a, &|ga| ga.iter_mut().for_each(|s| *s += d))
            }
            Op::Sum(a) => acc(grads, *a, &|ga| ga.iter_mut().for_each(|s| *s += g[0])),
            Op::Mse(a, b) => {
                let (av, bv) = (xval(*a), xval(*b));
                let c = T::lit(2.0) * g[0] / T::from_usize(av.len().max(1)).unwrap();
                acc(grads, *a, &|ga| {
                    for j in 0..ga.len() {
                        ga[j] += c * (av[j] - bv[j]);
                    }
                });
                acc(grads, *b, &|gb| {
                    for j in 0..gb.len() {
                        gb[j] -= c * (av[j] - bv[j]);
                    }
                });
            }
            Op::SumCols(a) => {
                let (_, n) = self.value(*a).dims2().unwrap();
                acc(grads, *a, &|ga| {
                    for (row, &d) in ga.chunks_mut(n).zip(g) {
                        row.iter_mut().for_each(|s| *s += d);
                    }
                })
            }
            Op::GatherCols(a, idx) => {
                let (_, n) = self.value(*a).dims2().unwrap();
                acc(grads, *a, &|ga| {
                    for (r, &c) in idx.iter().enumerate() {
                        ga[r * n + c] += g[r];
                    }
                })
            }
            Op::GatherRows(a, idx) => {
                let (_, n) = self.value(*a).dims2().unwrap();
                acc(grads, *a, &|ga| {
                    for (k, &r) in idx.iter().enumerate() {
                        let dst = &mut ga[r * n..(r + 1) * n];
                        dst.iter_mut().zip(&g[k * n..(k + 1) * n]).for_each(|(s, &d)| *s += d);
                    }
                })
            }
            Op::BatchedMatVec(x, w) => {
                let (m, p) = self.value(*x).dims2().unwrap();
                let (_, pq) = self.value(*w).dims2().unwrap();
                let q = pq / p;
                let (xv, wv) = (xval(*x), xval(*w));
                acc(grads, *x, &|gx| {
                    for r in 0..m {
                        let gr = &g[r * q..(r + 1) * q];
                        for k in 0..p {
                            let wrow = &wv[r * pq + k * q..r * pq + (k + 1) * q];
                            gx[r * p + k] += gr.iter().zip(wrow).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    }
                });
                acc(grads, *w, &|gw| {
                    for r in 0..m {
                        let gr = &g[r * q..(r + 1) * q];
                        for k in 0..p {
                            let xk = xv[r * p + k];
                            let dst = &mut gw[r * pq + k * q..r * pq + (k + 1) * q];
                            dst.iter_mut().zip(gr).for_each(|(s, &d)| *s += xk * d);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Tape::new()
    }
}

pub(crate) mod kernels {
    use crate::scalar::Scalar;

    /// `out[m, n] = a[m, k] * b[k, n]` (overwrites `out`).
    pub fn matmul<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let o = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                o.iter_mut().zip(brow).for_each(|(x, &y)| *x += aip * y);
            }
        }
    }

    /// `ga[m, k] += g[m, n] * b[k, n]^T`
    pub fn matmul_bt_acc<T: Scalar>(g: &[T], b: &[T], ga: &mut [T], m: usize, n: usize, k: usize) {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                ga[i * k + p] += grow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<T>();
            }
        }
    }

    /// `gb[k, n] += a[m, k]^T * g[m, n]`
    pub fn matmul_at_acc<T: Scalar>(a: &[T], g: &[T], gb: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                let dst = &mut gb[p * n..(p + 1) * n];
                dst.iter_mut().zip(grow).for_each(|(x, &y)| *x += aip * y);
            }
        }
    }

    pub fn sigmoid<T: Scalar>(x: T) -> T {
        if x >= T::zero() {
            T::one() / (T::one() + (-x).exp())
        } else {
            let e = x.exp();
            e / (T::one() + e)
        }
    }

    pub fn softplus<T: Scalar>(x: T) -> T {
        x.max(T::zero()) + (-x.abs()).exp().ln_1p()
    }

    pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        row.iter_mut().for_each(|x| *x = *x / s);
    }
}
