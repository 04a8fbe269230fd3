//! Wengert-list reverse-mode autodiff.
//!
//! Every forward operation on a [`Var`] appends a node to its [`Tape`]; inputs
//! always precede the node that consumes them, so a single reverse sweep over
//! the node list visits each node after all of its consumers.

use std::cell::{Ref, RefCell};
use std::fmt;

use super::kernels::{self, ConvGeom};
use super::{axis_split, matmul_dims, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type NodeId = usize;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    DivScalar(NodeId, NodeId),
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    MatmulNt { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Transpose { x: NodeId, rows: usize, cols: usize },
    Relu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    ClampMin(NodeId, T),
    Softmax { x: NodeId, outer: usize, len: usize, inner: usize },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, inv_std: Vec<T>, rows: usize, n: usize },
    Sum(NodeId),
    Reshape(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols { parts: Vec<NodeId>, rows: usize },
    SliceRows { x: NodeId, start: usize, len: usize, cols: usize },
    SliceCols { x: NodeId, start: usize, len: usize, cols: usize },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom, c_out: usize, cols: Vec<T> },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    Gather { x: NodeId, index: Vec<usize> },
    Squash { x: NodeId, d: usize },
    RowNorm { x: NodeId, d: usize },
    CapsPredict { u: NodeId, w: NodeId, n_in: usize, n_out: usize, d_out: usize, d_in: usize },
    RoutingCombine { c: NodeId, u: NodeId, n_in: usize, n_out: usize, d: usize },
    Agreement { u: NodeId, v: NodeId, n_in: usize, n_out: usize, d: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of the operations of one forward pass.
///
/// A tape is single-use: build it during a forward pass, call
/// [`Tape::backward`], then drop it.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.nodes.borrow().len())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: NodeId,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }

    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads[v.id].as_ref()
    }

    /// Moves the gradient out, leaving zeros in its place.
    pub fn take(&mut self, v: Var<'_, T>) -> Tensor<T> {
        self.grads[v.id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if !nodes[loss.id].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::new(nodes[loss.id].value.shape(), vec![T::one()])?);
        for id in (0..=loss.id).rev() {
            let (lower, upper) = grads.split_at_mut(id);
            let Some(g) = upper[0].as_ref() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, node, g.data(), lower);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Mutable gradient buffer of `id`, created on first use; `None` for constants.
fn slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Tensor<T>>],
    id: NodeId,
) -> Option<&'a mut [T]> {
    if !nodes[id].requires_grad {
        return None;
    }
    let g = grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape()));
    Some(g.data_mut())
}

fn backprop<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Tensor<T>>]) {
    let val = |id: NodeId| nodes[id].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for id in [*a, *b] {
                if let Some(d) = slot(nodes, grads, id) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(d) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    d[i] += g[i] * bv[i];
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                for i in 0..g.len() {
                    d[i] += g[i] * av[i];
                }
            }
        }
        Op::AddRow(x, b) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                let n = d.len();
                for (i, &gv) in g.iter().enumerate() {
                    d[i % n] += gv;
                }
            }
        }
        Op::MulRow(x, s) => {
            let (xv, sv) = (val(*x), val(*s));
            let n = sv.len();
            if let Some(d) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    d[i] += g[i] * sv[i % n];
                }
            }
            if let Some(d) = slot(nodes, grads, *s) {
                for i in 0..g.len() {
                    d[i % n] += g[i] * xv[i];
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c);
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
        }
        Op::DivScalar(x, s) => {
            let (xv, s_val) = (val(*x), val(*s)[0]);
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g / s_val);
            }
            if let Some(d) = slot(nodes, grads, *s) {
                let dot: T = g.iter().zip(xv).map(|(&g, &x)| g * x).sum();
                d[0] -= dot / (s_val * s_val);
            }
        }
        Op::Matmul { a, b, m, k, n } => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(d) = slot(nodes, grads, *a) {
                kernels::matmul_nt_acc(g, bv, d, *m, *n, *k);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                kernels::matmul_tn_acc(av, g, d, *m, *k, *n);
            }
        }
        Op::MatmulNt { a, b, m, k, n } => {
            // out = a·bᵀ with a [m×k], b [n×k]
            let (av, bv) = (val(*a), val(*b));
            if let Some(d) = slot(nodes, grads, *a) {
                kernels::matmul_acc(g, bv, d, *m, *n, *k);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                kernels::matmul_tn_acc(g, av, d, *m, *n, *k);
            }
        }
        Op::Transpose { x, rows, cols } => {
            if let Some(d) = slot(nodes, grads, *x) {
                for r in 0..*rows {
                    for c in 0..*cols {
                        d[r * cols + c] += g[c * rows + r];
                    }
                }
            }
        }
        Op::Relu(x) => {
            let xv = val(*x);
            if let Some(d) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    if xv[i] > T::zero() {
                        d[i] += g[i];
                    }
                }
            }
        }
        Op::Exp(x) => {
            let y = node.value.data();
            if let Some(d) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    d[i] += g[i] * y[i];
                }
            }
        }
        Op::Ln(x) => {
            let xv = val(*x);
            if let Some(d) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    d[i] += g[i] / xv[i];
                }
            }
        }
        Op::ClampMin(x, lo) => {
            let xv = val(*x);
            if let Some(d) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    if xv[i] >= *lo {
                        d[i] += g[i];
                    }
                }
            }
        }
        Op::Softmax { x, outer, len, inner } => {
            let y = node.value.data();
            if let Some(d) = slot(nodes, grads, *x) {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for a in 0..*len {
                            let j = base + a * inner;
                            dot += g[j] * y[j];
                        }
                        for a in 0..*len {
                            let j = base + a * inner;
                            d[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std, rows, n } => {
            let gv = val(*gamma);
            let nf = T::of(*n as f64);
            if let Some(d) = slot(nodes, grads, *x) {
                for r in 0..*rows {
                    let off = r * n;
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..*n {
                        let dh = g[off + j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[off + j];
                    }
                    for j in 0..*n {
                        let dh = g[off + j] * gv[j];
                        d[off + j] += inv_std[r] / nf * (nf * dh - sum_dh - xhat[off + j] * sum_dh_h);
                    }
                }
            }
            if let Some(d) = slot(nodes, grads, *gamma) {
                for (i, &gi) in g.iter().enumerate() {
                    d[i % n] += gi * xhat[i];
                }
            }
            if let Some(d) = slot(nodes, grads, *beta) {
                for (i, &gi) in g.iter().enumerate() {
                    d[i % n] += gi;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p].value.numel();
                if let Some(d) = slot(nodes, grads, p) {
                    d.iter_mut().zip(&g[off..off + len]).for_each(|(d, &g)| *d += g);
                }
                off += len;
            }
        }
        Op::ConcatCols { parts, rows } => {
            let total: usize = g.len() / rows;
            let mut col = 0;
            for &p in parts {
                let w = nodes[p].value.numel() / rows;
                if let Some(d) = slot(nodes, grads, p) {
                    for r in 0..*rows {
                        for c in 0..w {
                            d[r * w + c] += g[r * total + col + c];
                        }
                    }
                }
                col += w;
            }
        }
        Op::SliceRows { x, start, len, cols } => {
            if let Some(d) = slot(nodes, grads, *x) {
                let off = start * cols;
                d[off..off + len * cols]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &g)| *d += g);
            }
        }
        Op::SliceCols { x, start, len, cols } => {
            if let Some(d) = slot(nodes, grads, *x) {
                let rows = g.len() / len;
                for r in 0..rows {
                    for c in 0..*len {
                        d[r * cols + start + c] += g[r * len + c];
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, geom, c_out, cols } => {
            let (kk, hw) = (geom.cols_rows(), geom.cols_len());
            if let Some(d) = slot(nodes, grads, *w) {
                kernels::matmul_nt_acc(g, cols, d, *c_out, hw, kk);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                for co in 0..*c_out {
                    d[co] += g[co * hw..(co + 1) * hw].iter().copied().sum();
                }
            }
            if nodes[*x].requires_grad {
                let mut dcols = vec![T::zero(); kk * hw];
                kernels::matmul_tn_acc(val(*w), g, &mut dcols, *c_out, kk, hw);
                if let Some(d) = slot(nodes, grads, *x) {
                    kernels::col2im(&dcols, geom, d);
                }
            }
        }
        Op::MaxPool { x, argmax } => {
            if let Some(d) = slot(nodes, grads, *x) {
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] += g[o];
                }
            }
        }
        Op::Gather { x, index } => {
            if let Some(d) = slot(nodes, grads, *x) {
                for (o, &src) in index.iter().enumerate() {
                    d[src] += g[o];
                }
            }
        }
        Op::Squash { x, d: dim } => {
            let xv = val(*x);
            if let Some(dx) = slot(nodes, grads, *x) {
                let eps = T::of(SQUASH_EPS);
                for r in 0..xv.len() / dim {
                    let s = &xv[r * dim..(r + 1) * dim];
                    let gr = &g[r * dim..(r + 1) * dim];
                    let n2: T = s.iter().map(|&v| v * v).sum();
                    let n = n2.sqrt();
                    let den = (T::one() + n2) * (n + eps);
                    let f = n2 / den;
                    // d(f)/dn, applied through dn/ds = s/n
                    let dden = T::of(2.0) * n * (n + eps) + T::one() + n2;
                    let fp = (T::of(2.0) * n * den - n2 * dden) / (den * den);
                    let sg: T = s.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    let coef = if n > T::zero() { fp / n * sg } else { T::zero() };
                    for j in 0..*dim {
                        dx[r * dim + j] += f * gr[j] + coef * s[j];
                    }
                }
            }
        }
        Op::RowNorm { x, d: dim } => {
            let (xv, y) = (val(*x), node.value.data());
            if let Some(dx) = slot(nodes, grads, *x) {
                for r in 0..y.len() {
                    for j in 0..*dim {
                        dx[r * dim + j] += g[r] * xv[r * dim + j] / y[r];
                    }
                }
            }
        }
        Op::CapsPredict { u, w, n_in, n_out, d_out, d_in } => {
            let (uv, wv) = (val(*u), val(*w));
            if let Some(du) = slot(nodes, grads, *u) {
                for i in 0..*n_in {
                    for j in 0..*n_out {
                        let gb = (i * n_out + j) * d_out;
                        let wb = (i * n_out + j) * d_out * d_in;
                        for o in 0..*d_out {
                            let go = g[gb + o];
                            for q in 0..*d_in {
                                du[i * d_in + q] += go * wv[wb + o * d_in + q];
                            }
                        }
                    }
                }
            }
            if let Some(dw) = slot(nodes, grads, *w) {
                for i in 0..*n_in {
                    for j in 0..*n_out {
                        let gb = (i * n_out + j) * d_out;
                        let wb = (i * n_out + j) * d_out * d_in;
                        for o in 0..*d_out {
                            let go = g[gb + o];
                            for q in 0..*d_in {
                                dw[wb + o * d_in + q] += go * uv[i * d_in + q];
                            }
                        }
                    }
                }
            }
        }
        Op::RoutingCombine { c, u, n_in, n_out, d } => {
            let (cv, uv) = (val(*c), val(*u));
            if let Some(dc) = slot(nodes, grads, *c) {
                for i in 0..*n_in {
                    for j in 0..*n_out {
                        let ub = (i * n_out + j) * d;
                        dc[i * n_out + j] += (0..*d).map(|q| g[j * d + q] * uv[ub + q]).sum();
                    }
                }
            }
            if let Some(du) = slot(nodes, grads, *u) {
                for i in 0..*n_in {
                    for j in 0..*n_out {
                        let ub = (i * n_out + j) * d;
                        let cij = cv[i * n_out + j];
                        for q in 0..*d {
                            du[ub + q] += cij * g[j * d + q];
                        }
                    }
                }
            }
        }
        Op::Agreement { u, v, n_in, n_out, d } => {
            let (uv, vv) = (val(*u), val(*v));
            if let Some(du) = slot(nodes, grads, *u) {
                for i in 0..*n_in {
                    for j in 0..*n_out {
                        let gij = g[i * n_out + j];
                        let ub = (i * n_out + j) * d;
                        for q in 0..*d {
                            du[ub + q] += gij * vv[j * d + q];
                        }
                    }
                }
            }
            if let Some(dv) = slot(nodes, grads, *v) {
                for i in 0..*n_in {
                    for j in 0..*n_out {
                        let gij = g[i * n_out + j];
                        let ub = (i * n_out + j) * d;
                        for q in 0..*d {
                            dv[j * d + q] += gij * uv[ub + q];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) const SQUASH_EPS: f64 = 1e-8;
const ROW_NORM_EPS: f64 = 1e-12;

/// Eps-guarded squash of each length-`d` row of `s`.
pub(crate) fn squash_rows<T: Scalar>(s: &[T], d: usize) -> Vec<T> {
    let eps = T::of(SQUASH_EPS);
    let mut out = Vec::with_capacity(s.len());
    for row in s.chunks(d) {
        let n2: T = row.iter().map(|&v| v * v).sum();
        let n = n2.sqrt();
        let f = n2 / ((T::one() + n2) * (n + eps));
        out.extend(row.iter().map(|&v| v * f));
    }
    out
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn elementwise(
        &self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(Error::dim(
                    name,
                    format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
                ));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape(), data)?
        };
        Ok(self.tape.push(out, op, &[self.id, other.id]))
    }

    fn unary(&self, f: impl Fn(T) -> T, op: Op<T>) -> Var<'t, T> {
        let out = self.value().map(f);
        self.tape.push(out, op, &[self.id])
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    fn row_broadcast(
        self,
        row: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&row);
        let out = {
            let (x, r) = (self.value(), row.value());
            let n = r.numel();
            if r.rank() != 1 || x.shape().last() != Some(&n) {
                return Err(Error::dim(
                    name,
                    format!("cannot broadcast {:?} over rows of {:?}", r.shape(), x.shape()),
                ));
            }
            let rd = r.data();
            let data = x.data().iter().enumerate().map(|(i, &v)| f(v, rd[i % n])).collect();
            Tensor::new(x.shape(), data)?
        };
        Ok(self.tape.push(out, op, &[self.id, row.id]))
    }

    /// Adds a vector to every row (last axis) of `self`.
    pub fn add_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        self.row_broadcast(row, "add_row", |a, b| a + b, Op::AddRow(self.id, row.id))
    }

    /// Multiplies every row (last axis) of `self` elementwise by a vector.
    pub fn mul_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        self.row_broadcast(row, "mul_row", |a, b| a * b, Op::MulRow(self.id, row.id))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        self.unary(|v| v * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        self.unary(|v| v + c, Op::AddScalar(self.id))
    }

    /// Divides every element by a one-element var.
    pub fn div_scalar(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&s);
        let sv = s.value().item()?;
        Ok(self.unary(|v| v / sv, Op::DivScalar(self.id, s.id)))
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (out, m, k, n) = {
            let (a, b) = (self.value(), other.value());
            let (m, k, n) = matmul_dims("matmul", a.shape(), b.shape())?;
            let mut out = vec![T::zero(); m * n];
            kernels::matmul(a.data(), b.data(), &mut out, m, k, n);
            (Tensor::new(&[m, n], out)?, m, k, n)
        };
        Ok(self
            .tape
            .push(out, Op::Matmul { a: self.id, b: other.id, m, k, n }, &[self.id, other.id]))
    }

    /// `self · otherᵀ` for `self` [m×k] and `other` [n×k].
    pub fn matmul_nt(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (out, m, k, n) = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
                return Err(Error::dim(
                    "matmul_nt",
                    format!("cannot multiply {sa:?} by transpose of {sb:?}"),
                ));
            }
            let (m, k, n) = (sa[0], sa[1], sb[0]);
            let mut out = vec![T::zero(); m * n];
            kernels::matmul_nt_acc(a.data(), b.data(), &mut out, m, k, n);
            (Tensor::new(&[m, n], out)?, m, k, n)
        };
        Ok(self
            .tape
            .push(out, Op::MatmulNt { a: self.id, b: other.id, m, k, n }, &[self.id, other.id]))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let (out, rows, cols) = {
            let x = self.value();
            if x.rank() != 2 {
                return Err(Error::dim("transpose", format!("needs rank 2, got {:?}", x.shape())));
            }
            let (rows, cols) = (x.shape()[0], x.shape()[1]);
            let d = x.data();
            let t = Tensor::from_fn(&[cols, rows], |i| d[(i % rows) * cols + i / rows]);
            (t, rows, cols)
        };
        Ok(self.tape.push(out, Op::Transpose { x: self.id, rows, cols }, &[self.id]))
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(|v| v.max(T::zero()), Op::Relu(self.id))
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|v| v.exp(), Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t, T> {
        self.unary(|v| v.ln(), Op::Ln(self.id))
    }

    /// `max(x, lo)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(self, lo: T) -> Var<'t, T> {
        self.unary(|v| v.max(lo), Op::ClampMin(self.id, lo))
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.mul(self)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let (out, outer, len, inner) = {
            let x = self.value();
            let (outer, len, inner) = axis_split("softmax", x.shape(), axis)?;
            let mut data = x.data().to_vec();
            kernels::softmax(&mut data, outer, len, inner);
            (Tensor::new(x.shape(), data)?, outer, len, inner)
        };
        Ok(self
            .tape
            .push(out, Op::Softmax { x: self.id, outer, len, inner }, &[self.id]))
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (out, xhat, inv_std, rows, n) = {
            let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
            let n = *x.shape().last().unwrap_or(&1);
            if x.rank() == 0 || gv.shape() != [n] || bv.shape() != [n] {
                return Err(Error::dim(
                    "layer_norm",
                    format!(
                        "input {:?} with gamma {:?}, beta {:?}",
                        x.shape(),
                        gv.shape(),
                        bv.shape()
                    ),
                ));
            }
            let rows = x.numel() / n;
            let nf = T::of(n as f64);
            let mut xhat = vec![T::zero(); x.numel()];
            let mut inv_std = vec![T::zero(); rows];
            let mut out = vec![T::zero(); x.numel()];
            for r in 0..rows {
                let row = &x.data()[r * n..(r + 1) * n];
                let mean = row.iter().copied().sum::<T>() / nf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                let is = T::one() / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..n {
                    let h = (row[j] - mean) * is;
                    xhat[r * n + j] = h;
                    out[r * n + j] = h * gv.data()[j] + bv.data()[j];
                }
            }
            (Tensor::new(x.shape(), out)?, xhat, inv_std, rows, n)
        };
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            inv_std,
            rows,
            n,
        };
        Ok(self.tape.push(out, op, &[self.id, gamma.id, beta.id]))
    }

    pub fn sum(self) -> Var<'t, T> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(out, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel();
        self.sum().scale(T::one() / T::of(n as f64))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id), &[self.id]))
    }

    /// Row `i` of a rank-2 var as a vector.
    pub fn row(self, i: usize) -> Result<Var<'t, T>> {
        let cols = self.shape().get(1).copied().unwrap_or(0);
        self.slice_rows(i, 1)?.reshape(&[cols])
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let (out, cols) = {
            let x = self.value();
            if x.rank() != 2 || len == 0 || start + len > x.shape()[0] {
                return Err(Error::dim(
                    "slice_rows",
                    format!("rows {start}..{} of {:?}", start + len, x.shape()),
                ));
            }
            let cols = x.shape()[1];
            let data = x.data()[start * cols..(start + len) * cols].to_vec();
            (Tensor::new(&[len, cols], data)?, cols)
        };
        Ok(self
            .tape
            .push(out, Op::SliceRows { x: self.id, start, len, cols }, &[self.id]))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let (out, cols) = {
            let x = self.value();
            if x.rank() != 2 || len == 0 || start + len > x.shape()[1] {
                return Err(Error::dim(
                    "slice_cols",
                    format!("cols {start}..{} of {:?}", start + len, x.shape()),
                ));
            }
            let (rows, cols) = (x.shape()[0], x.shape()[1]);
            let d = x.data();
            let t = Tensor::from_fn(&[rows, len], |i| d[(i / len) * cols + start + i % len]);
            (t, cols)
        };
        Ok(self
            .tape
            .push(out, Op::SliceCols { x: self.id, start, len, cols }, &[self.id]))
    }

    /// Stacks rank-2 vars with equal column counts on top of each other.
    pub fn concat_rows(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let tape = first.tape;
        let out = {
            let cols = first.shape().get(1).copied().unwrap_or(0);
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                first.same_tape(p);
                let v = p.value();
                if v.rank() != 2 || v.shape()[1] != cols {
                    return Err(Error::dim(
                        "concat_rows",
                        format!("part {:?} does not have {cols} columns", v.shape()),
                    ));
                }
                rows += v.shape()[0];
                data.extend_from_slice(v.data());
            }
            Tensor::new(&[rows, cols], data)?
        };
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(out, Op::ConcatRows(ids.clone()), &ids))
    }

    /// Places rank-2 vars with equal row counts side by side.
    pub fn concat_cols(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let tape = first.tape;
        let rows = first.shape().first().copied().unwrap_or(0);
        let out = {
            let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
            for v in &values {
                if v.rank() != 2 || v.shape()[0] != rows {
                    return Err(Error::dim(
                        "concat_cols",
                        format!("part {:?} does not have {rows} rows", v.shape()),
                    ));
                }
            }
            let total: usize = values.iter().map(|v| v.shape()[1]).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for v in &values {
                    let w = v.shape()[1];
                    data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
                }
            }
            Tensor::new(&[rows, total], data)?
        };
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(out, Op::ConcatCols { parts: ids.clone(), rows }, &ids))
    }

    /// Cross-correlation of a `[C×H×W]` input with `[C'×C×k×k]` weights plus bias.
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Var<'t, T>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&weight);
        self.same_tape(&bias);
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let (out, geom, c_out, cols) = {
            let (x, w, b) = (self.value(), weight.value(), bias.value());
            let (xs, ws) = (x.shape(), w.shape());
            if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
                return Err(Error::dim(
                    "conv2d",
                    format!("input {xs:?} incompatible with kernel {ws:?}"),
                ));
            }
            let (c_out, k) = (ws[0], ws[2]);
            if b.shape() != [c_out] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias {:?} for {c_out} output channels", b.shape()),
                ));
            }
            let (h, wd) = (xs[1], xs[2]);
            if k > h + 2 * pad || k > wd + 2 * pad {
                return Err(Error::dim(
                    "conv2d",
                    format!("kernel {k} larger than padded input {h}x{wd} (padding {pad})"),
                ));
            }
            let geom = ConvGeom {
                c_in: xs[0],
                h,
                w: wd,
                k,
                stride,
                pad,
                h_out: (h + 2 * pad - k) / stride + 1,
                w_out: (wd + 2 * pad - k) / stride + 1,
            };
            let cols = kernels::im2col(x.data(), &geom);
            let hw = geom.cols_len();
            let mut out = vec![T::zero(); c_out * hw];
            for co in 0..c_out {
                out[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v = b.data()[co]);
            }
            kernels::matmul_acc(w.data(), &cols, &mut out, c_out, geom.cols_rows(), hw);
            let t = Tensor::new(&[c_out, geom.h_out, geom.w_out], out)?;
            (t, geom, c_out, cols)
        };
        let op = Op::Conv2d {
            x: self.id,
            w: weight.id,
            b: bias.id,
            geom,
            c_out,
            cols,
        };
        Ok(self.tape.push(out, op, &[self.id, weight.id, bias.id]))
    }

    /// Max pooling over square windows of a `[C×H×W]` input; ties go to the
    /// first index in raster order.
    pub fn max_pool2d(self, window: usize, stride: usize) -> Result<Var<'t, T>> {
        if window == 0 || stride == 0 {
            return Err(Error::Contract("pool window and stride must be positive".into()));
        }
        let (out, argmax) = {
            let x = self.value();
            let s = x.shape();
            if s.len() != 3 || window > s[1] || window > s[2] {
                return Err(Error::dim(
                    "max_pool2d",
                    format!("window {window} exceeds input {s:?}"),
                ));
            }
            let (c, h, w) = (s[0], s[1], s[2]);
            let (ho, wo) = ((h - window) / stride + 1, (w - window) / stride + 1);
            let d = x.data();
            let mut out = Vec::with_capacity(c * ho * wo);
            let mut argmax = Vec::with_capacity(c * ho * wo);
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = ch * h * w + oy * stride * w + ox * stride;
                        for ky in 0..window {
                            for kx in 0..window {
                                let idx = ch * h * w + (oy * stride + ky) * w + ox * stride + kx;
                                if d[idx] > d[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(d[best]);
                        argmax.push(best);
                    }
                }
            }
            (Tensor::new(&[c, ho, wo], out)?, argmax)
        };
        Ok(self.tape.push(out, Op::MaxPool { x: self.id, argmax }, &[self.id]))
    }

    /// `out[i] = x[index[i]]` reshaped to `shape`; gradients scatter-add back.
    pub fn gather(self, index: Vec<usize>, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = {
            let x = self.value();
            if let Some(&bad) = index.iter().find(|&&i| i >= x.numel()) {
                return Err(Error::dim("gather", format!("index {bad} out of range for {:?}", x.shape())));
            }
            let d = x.data();
            Tensor::new(shape, index.iter().map(|&i| d[i]).collect())?
        };
        Ok(self.tape.push(out, Op::Gather { x: self.id, index }, &[self.id]))
    }

    /// Squash nonlinearity applied to every row along the last axis.
    pub fn squash(self) -> Result<Var<'t, T>> {
        let (out, d) = {
            let x = self.value();
            let d = *x
                .shape()
                .last()
                .ok_or_else(|| Error::dim("squash", "scalar input"))?;
            (Tensor::new(x.shape(), squash_rows(x.data(), d))?, d)
        };
        Ok(self.tape.push(out, Op::Squash { x: self.id, d }, &[self.id]))
    }

    /// Euclidean length of every row along the last axis.
    pub fn row_norms(self) -> Result<Var<'t, T>> {
        let (out, d) = {
            let x = self.value();
            let s = x.shape();
            let d = *s.last().ok_or_else(|| Error::dim("row_norms", "scalar input"))?;
            let eps = T::of(ROW_NORM_EPS);
            let data: Vec<T> = x
                .data()
                .chunks(d)
                .map(|r| (r.iter().map(|&v| v * v).sum::<T>() + eps).sqrt())
                .collect();
            let shape = if s.len() == 1 { vec![1] } else { s[..s.len() - 1].to_vec() };
            (Tensor::new(&shape, data)?, d)
        };
        Ok(self.tape.push(out, Op::RowNorm { x: self.id, d }, &[self.id]))
    }

    /// Capsule predictions `û[i,j] = W[i,j] · u[i]` for `u` [n_in×d_in] and
    /// `w` [n_in×n_out×d_out×d_in].
    pub fn caps_predict(self, w: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&w);
        let (out, n_in, n_out, d_out, d_in) = {
            let (u, wv) = (self.value(), w.value());
            let (us, ws) = (u.shape(), wv.shape());
            if us.len() != 2 || ws.len() != 4 || ws[0] != us[0] || ws[3] != us[1] {
                return Err(Error::dim(
                    "caps_predict",
                    format!("capsules {us:?} incompatible with transforms {ws:?}"),
                ));
            }
            let (n_in, n_out, d_out, d_in) = (ws[0], ws[1], ws[2], ws[3]);
            let (ud, wd) = (u.data(), wv.data());
            let mut out = vec![T::zero(); n_in * n_out * d_out];
            for i in 0..n_in {
                let ui = &ud[i * d_in..(i + 1) * d_in];
                for j in 0..n_out {
                    for o in 0..d_out {
                        let wb = ((i * n_out + j) * d_out + o) * d_in;
                        out[(i * n_out + j) * d_out + o] =
                            wd[wb..wb + d_in].iter().zip(ui).map(|(&a, &b)| a * b).sum();
                    }
                }
            }
            (Tensor::new(&[n_in, n_out, d_out], out)?, n_in, n_out, d_out, d_in)
        };
        let op = Op::CapsPredict {
            u: self.id,
            w: w.id,
            n_in,
            n_out,
            d_out,
            d_in,
        };
        Ok(self.tape.push(out, op, &[self.id, w.id]))
    }

    /// `s[j] = Σ_i c[i,j] · û[i,j]` for couplings `self` [n_in×n_out].
    pub fn routing_combine(self, u_hat: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&u_hat);
        let (out, n_in, n_out, d) = {
            let (c, u) = (self.value(), u_hat.value());
            let (cs, us) = (c.shape(), u.shape());
            if cs.len() != 2 || us.len() != 3 || cs[0] != us[0] || cs[1] != us[1] {
                return Err(Error::dim(
                    "routing_combine",
                    format!("couplings {cs:?} incompatible with predictions {us:?}"),
                ));
            }
            let (n_in, n_out, d) = (us[0], us[1], us[2]);
            let (cd, ud) = (c.data(), u.data());
            let mut out = vec![T::zero(); n_out * d];
            for i in 0..n_in {
                for j in 0..n_out {
                    let cij = cd[i * n_out + j];
                    let ub = (i * n_out + j) * d;
                    for q in 0..d {
                        out[j * d + q] += cij * ud[ub + q];
                    }
                }
            }
            (Tensor::new(&[n_out, d], out)?, n_in, n_out, d)
        };
        let op = Op::RoutingCombine {
            c: self.id,
            u: u_hat.id,
            n_in,
            n_out,
            d,
        };
        Ok(self.tape.push(out, op, &[self.id, u_hat.id]))
    }

    /// Agreement `a[i,j] = û[i,j] · v[j]` for predictions `self` and outputs `v`.
    pub fn agreement(self, v: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&v);
        let (out, n_in, n_out, d) = {
            let (u, vv) = (self.value(), v.value());
            let (us, vs) = (u.shape(), vv.shape());
            if us.len() != 3 || vs.len() != 2 || us[1] != vs[0] || us[2] != vs[1] {
                return Err(Error::dim(
                    "agreement",
                    format!("predictions {us:?} incompatible with outputs {vs:?}"),
                ));
            }
            let (n_in, n_out, d) = (us[0], us[1], us[2]);
            let (ud, vd) = (u.data(), vv.data());
            let out = Tensor::from_fn(&[n_in, n_out], |ij| {
                let j = ij % n_out;
                (0..d).map(|q| ud[ij * d + q] * vd[j * d + q]).sum()
            });
            (out, n_in, n_out, d)
        };
        let op = Op::Agreement {
            u: self.id,
            v: v.id,
            n_in,
            n_out,
            d,
        };
        Ok(self.tape.push(out, op, &[self.id, v.id]))
    }
}
