//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node holding its output value and parent ids. Node ids
//! grow monotonically, so the node vector is already a topological order and
//! [`Var::backward`] is a single reverse sweep.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{matmul_nt, matmul_tn};
use super::{NdError, Tensor};

/// The operation that produced a tape node.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Leaf,
    MatMul,
    AddBias,
    SliceRows { start: usize, end: usize },
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Sqrt,
    Square,
    Relu,
    LogSoftmax,
    Sum,
    Mean,
    Scale(f64),
    AddScalar(f64),
    Clamp { lo: f64, hi: f64 },
    Pick(Rc<[usize]>),
    /// Scalar function of scalar parents with local partials fixed at forward time.
    ScalarFn(Vec<f64>),
}

struct Node {
    op: OpKind,
    parents: Vec<usize>,
    value: Rc<Tensor>,
    requires_grad: bool,
}

/// Single-threaded recording of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose gradient is reported by [`Var::backward`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(OpKind::Leaf, Vec::new(), value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(OpKind::Leaf, Vec::new(), value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Op kind and parent ids of a node.
    pub fn node(&self, id: usize) -> Option<(OpKind, Vec<usize>)> {
        self.nodes
            .borrow()
            .get(id)
            .map(|n| (n.op.clone(), n.parents.clone()))
    }

    /// Records a scalar function `f(parents)` whose local partial derivatives
    /// the caller has already evaluated.
    pub fn scalar_fn<'t>(
        &'t self,
        parents: &[Var<'t>],
        value: f64,
        partials: Vec<f64>,
    ) -> Result<Var<'t>, NdError> {
        if parents.len() != partials.len() {
            return Err(NdError::Invalid {
                op: "scalar_fn",
                msg: format!("{} parents but {} partials", parents.len(), partials.len()),
            });
        }
        for p in parents {
            if !p.value().is_scalar() {
                return Err(NdError::NotScalar {
                    shape: p.shape(),
                });
            }
        }
        let ids = parents.iter().map(|p| p.id).collect();
        Ok(self.push(OpKind::ScalarFn(partials), ids, Tensor::scalar(value), false))
    }

    fn push(&self, op: OpKind, parents: Vec<usize>, value: Tensor, leaf_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = leaf_grad || parents.iter().any(|&p| nodes[p].requires_grad);
        let id = nodes.len();
        nodes.push(Node {
            op,
            parents,
            value: Rc::new(value),
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }
}

/// Gradients of a scalar loss with respect to every tracked leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a tracked leaf; `None` for constants and interior nodes.
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: &Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value; panics on non-scalars, which is a programming error here.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on non-scalar {:?}", v.shape());
        v.data()[0]
    }

    fn unary(self, op: OpKind, value: Tensor) -> Var<'t> {
        self.tape.push(op, vec![self.id], value, false)
    }

    fn binary(self, other: Var<'t>, op: OpKind, value: Tensor) -> Var<'t> {
        self.tape.push(op, vec![self.id, other.id], value, false)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, NdError> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, OpKind::MatMul, v))
    }

    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>, NdError> {
        let v = self.value().add_bias(&bias.value())?;
        Ok(self.binary(bias, OpKind::AddBias, v))
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>, NdError> {
        let v = self.value().slice_rows(start, end)?;
        Ok(self.unary(OpKind::SliceRows { start, end }, v))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, NdError> {
        let v = self.value().add(&other.value())?;
        Ok(self.binary(other, OpKind::Add, v))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, NdError> {
        let v = self.value().sub(&other.value())?;
        Ok(self.binary(other, OpKind::Sub, v))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, NdError> {
        let v = self.value().mul(&other.value())?;
        Ok(self.binary(other, OpKind::Mul, v))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(OpKind::Exp, v)
    }

    pub fn log(self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.unary(OpKind::Log, v)
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.value().map(f64::sqrt);
        self.unary(OpKind::Sqrt, v)
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.unary(OpKind::Square, v)
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| if x > 0.0 { x } else { 0.0 });
        self.unary(OpKind::Relu, v)
    }

    pub fn log_softmax(self) -> Result<Var<'t>, NdError> {
        let v = self.value().log_softmax_rows()?;
        Ok(self.unary(OpKind::LogSoftmax, v))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(OpKind::Sum, v)
    }

    pub fn mean(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().mean());
        self.unary(OpKind::Mean, v)
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let v = self.value().scale(k);
        self.unary(OpKind::Scale(k), v)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(OpKind::AddScalar(c), v)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.unary(OpKind::Clamp { lo, hi }, v)
    }

    /// `x[r, labels[r]]` for each row `r`.
    pub fn pick(self, labels: &[usize]) -> Result<Var<'t>, NdError> {
        let v = self.value().pick_rows(labels)?;
        Ok(self.unary(OpKind::Pick(Rc::from(labels)), v))
    }

    /// Reverse sweep from a scalar.
    pub fn backward(&self) -> Result<Gradients, NdError> {
        let nodes = self.tape.nodes.borrow();
        let root = &nodes[self.id];
        if root.value.len() != 1 {
            return Err(NdError::NotScalar {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![1.0]);

        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || node.parents.is_empty() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let needs = |p: usize| nodes[p].requires_grad;
            let pv = |i: usize| &nodes[node.parents[i]].value;
            match &node.op {
                OpKind::Leaf => {}
                OpKind::MatMul => {
                    let (a, b) = (pv(0), pv(1));
                    let (m, k, n) = (a.rows(), a.cols(), b.cols());
                    if needs(node.parents[0]) {
                        let mut ga = vec![0.0; m * k];
                        matmul_nt(&g, b.data(), &mut ga, m, k, n);
                        accumulate(&mut grads, node.parents[0], ga);
                    }
                    if needs(node.parents[1]) {
                        let mut gb = vec![0.0; k * n];
                        matmul_tn(a.data(), &g, &mut gb, m, k, n);
                        accumulate(&mut grads, node.parents[1], gb);
                    }
                }
                OpKind::AddBias => {
                    let n = pv(1).len();
                    if needs(node.parents[1]) {
                        let mut gb = vec![0.0; n];
                        for row in g.chunks_exact(n) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, node.parents[1], gb);
                    }
                    if needs(node.parents[0]) {
                        accumulate(&mut grads, node.parents[0], g);
                    }
                }
                OpKind::SliceRows { start, end: _ } => {
                    let x = pv(0);
                    let n = x.cols();
                    let mut gx = vec![0.0; x.len()];
                    gx[start * n..start * n + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, node.parents[0], gx);
                }
                OpKind::Add | OpKind::Sub => {
                    if needs(node.parents[1]) {
                        let gb = if node.op == OpKind::Sub {
                            g.iter().map(|v| -v).collect()
                        } else {
                            g.clone()
                        };
                        accumulate(&mut grads, node.parents[1], gb);
                    }
                    if needs(node.parents[0]) {
                        accumulate(&mut grads, node.parents[0], g);
                    }
                }
                OpKind::Mul => {
                    let (a, b) = (pv(0), pv(1));
                    if needs(node.parents[0]) {
                        let ga = g.iter().zip(b.data()).map(|(g, b)| g * b).collect();
                        accumulate(&mut grads, node.parents[0], ga);
                    }
                    if needs(node.parents[1]) {
                        let gb = g.iter().zip(a.data()).map(|(g, a)| g * a).collect();
                        accumulate(&mut grads, node.parents[1], gb);
                    }
                }
                OpKind::Exp => {
                    let gx = zip_with(&g, node.value.data(), |g, y| g * y);
                    accumulate(&mut grads, node.parents[0], gx);
                }
                OpKind::Log => {
                    let gx = zip_with(&g, pv(0).data(), |g, x| g / x);
                    accumulate(&mut grads, node.parents[0], gx);
                }
                OpKind::Sqrt => {
                    let gx = zip_with(&g, node.value.data(), |g, y| 0.5 * g / y);
                    accumulate(&mut grads, node.parents[0], gx);
                }
                OpKind::Square => {
                    let gx = zip_with(&g, pv(0).data(), |g, x| 2.0 * g * x);
                    accumulate(&mut grads, node.parents[0], gx);
                }
                OpKind::Relu => {
                    let gx = zip_with(&g, pv(0).data(), |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, node.parents[0], gx);
                }
                OpKind::LogSoftmax => {
                    let y = &node.value;
                    let n = y.cols();
                    let mut gx = vec![0.0; g.len()];
                    for ((gx_row, g_row), y_row) in gx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.data().chunks_exact(n))
                    {
                        let total: f64 = g_row.iter().sum();
                        for j in 0..n {
                            gx_row[j] = g_row[j] - y_row[j].exp() * total;
                        }
                    }
                    accumulate(&mut grads, node.parents[0], gx);
                }
                OpKind::Sum => {
                    let len = pv(0).len();
                    accumulate(&mut grads, node.parents[0], vec![g[0]; len]);
                }
                OpKind::Mean => {
                    let len = pv(0).len();
                    accumulate(&mut grads, node.parents[0], vec![g[0] / len as f64; len]);
                }
                OpKind::Scale(k) => {
                    let gx = g.iter().map(|v| v * k).collect();
                    accumulate(&mut grads, node.parents[0], gx);
                }
                OpKind::AddScalar(_) => accumulate(&mut grads, node.parents[0], g),
                OpKind::Clamp { lo, hi } => {
                    let gx = zip_with(&g, pv(0).data(), |g, x| {
                        if x >= *lo && x <= *hi {
                            g
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, node.parents[0], gx);
                }
                OpKind::Pick(labels) => {
                    let x = pv(0);
                    let n = x.cols();
                    let mut gx = vec![0.0; x.len()];
                    for (r, (&c, gv)) in labels.iter().zip(&g).enumerate() {
                        gx[r * n + c] = *gv;
                    }
                    accumulate(&mut grads, node.parents[0], gx);
                }
                OpKind::ScalarFn(partials) => {
                    for (&p, d) in node.parents.iter().zip(partials) {
                        if needs(p) {
                            accumulate(&mut grads, p, vec![g[0] * d]);
                        }
                    }
                }
            }
        }

        let out = nodes
            .iter()
            .enumerate()
            .map(|(id, node)| {
                if node.op == OpKind::Leaf && node.requires_grad {
                    let data = match grads.get_mut(id).and_then(|g| g.take()) {
                        Some(d) => d,
                        None => vec![0.0; node.value.len()],
                    };
                    Some(Tensor::new(node.value.shape().to_vec(), data).expect("gradient shape"))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: out })
    }
}

fn zip_with(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, contribution: Vec<f64>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}
