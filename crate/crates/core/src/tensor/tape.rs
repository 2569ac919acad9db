//! The recorded computation graph.
//!
//! A [`Tape`] is an append-only list of nodes, so node order is already a
//! topological order and the backward pass is a single reverse sweep. Each
//! episode builds its own tape; tapes are never shared between workers.

use super::gemm;
use super::{conv, probops};
use super::{Padding, ShapeError, Tensor};
use crate::scalar::Scalar;
use thiserror::Error;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called on a consumed graph")]
    Consumed,
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Operation that produced a node, with whatever the backward pass needs.
#[derive(Debug, Clone)]
pub enum Op<E> {
    Leaf,

    // Elementwise
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, E),
    AddScalar { x: Var, s: Var },
    Exp(Var),
    Ln(Var),
    ClampMin(Var, E),
    Relu(Var),
    Elu(Var),
    LeakyRelu(Var, E),
    Dropout { x: Var, mask: Vec<E> },

    // Shape
    Reshape(Var),
    StackRows(Vec<Var>),
    GatherStackRows(Vec<(Var, usize)>),
    ConcatCols(Var, Var),
    SliceCols { x: Var, from: usize, to: usize },
    SliceRows { x: Var, from: usize, to: usize },
    RepeatRow { v: Var, n: usize },
    MeanRows(Var),

    // Reductions and softmax
    SumAll(Var),
    MeanAll(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    NormalizeSum(Var),
    PickNegSum { logp: Var, targets: Vec<usize> },

    // Linear algebra
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    MatVec(Var, Var),
    VecMat(Var, Var),
    PairwiseSqDist(Var, Var),
    PairwiseCosDist(Var, Var),

    // Convolution stack
    Conv2d { input: Var, kernel: Var, stride: usize, padding: Padding },
    BiasAddChannel(Var, Var),
    MaxPool2d { input: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, eps: E, mean: Vec<E>, var: Vec<E>, training: bool },

    // Fused distribution ops
    MixtureRsample { means: Var, logvars: Var, noise: Vec<E>, comp_of_row: Vec<usize> },
    GaussMixLogDensity { xs: Var, means: Var, logvars: Var, log_weights: Option<Var> },
    GaussLogDensityMat { xs: Var, means: Var, logvars: Var },
    GaussKlBatch { q_mean: Var, q_logvar: Var, p_means: Var, p_logvars: Var },
}

impl<E> Op<E> {
    pub(crate) fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | MatVec(a, b) | VecMat(a, b)
            | PairwiseSqDist(a, b) | PairwiseCosDist(a, b) | ConcatCols(a, b)
            | BiasAddChannel(a, b) => vec![*a, *b],
            Neg(a) | Scale(a, _) | Exp(a) | Ln(a) | ClampMin(a, _) | Relu(a) | Elu(a)
            | LeakyRelu(a, _) | Reshape(a) | MeanRows(a) | SumAll(a) | MeanAll(a)
            | NormalizeSum(a) => vec![*a],
            AddScalar { x, s } => vec![*x, *s],
            Dropout { x, .. } => vec![*x],
            StackRows(parts) => parts.clone(),
            GatherStackRows(parts) => parts.iter().map(|(v, _)| *v).collect(),
            SliceCols { x, .. } | SliceRows { x, .. } => vec![*x],
            RepeatRow { v, .. } => vec![*v],
            Softmax { x, .. } | LogSoftmax { x, .. } => vec![*x],
            PickNegSum { logp, .. } => vec![*logp],
            Linear { x, w, b } => vec![*x, *w, *b],
            Conv2d { input, kernel, .. } => vec![*input, *kernel],
            MaxPool2d { input, .. } => vec![*input],
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            MixtureRsample { means, logvars, .. } => vec![*means, *logvars],
            GaussMixLogDensity { xs, means, logvars, log_weights } => {
                let mut p = vec![*xs, *means, *logvars];
                if let Some(w) = log_weights {
                    p.push(*w);
                }
                p
            }
            GaussLogDensityMat { xs, means, logvars } => vec![*xs, *means, *logvars],
            GaussKlBatch { q_mean, q_logvar, p_means, p_logvars } => {
                vec![*q_mean, *q_logvar, *p_means, *p_logvars]
            }
        }
    }
}

pub(crate) struct Node<E> {
    pub value: Tensor<E>,
    pub op: Op<E>,
    pub requires_grad: bool,
}

/// Recorded graph plus, after [`Tape::backward`], the per-node gradients.
pub struct Tape<E> {
    pub(crate) nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
    consumed: bool,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a constant leaf (no gradient).
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    /// Insert a trainable leaf; its gradient is available after `backward`.
    pub fn param(&mut self, value: &Tensor<E>) -> Var {
        self.push_node(value.clone(), Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push_node(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[E] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> E {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if one was populated.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn push_node(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    pub(crate) fn push_op(&mut self, value: Tensor<E>, op: Op<E>) -> Var {
        let rg = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_node(value, op, rg)
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// `requires_grad` node reachable from `loss`; accumulation into shared
    /// nodes is additive. The graph is consumed: a second call fails.
    pub fn backward(&mut self, loss: Var) -> Result<(), TapeError> {
        if self.consumed {
            return Err(TapeError::Consumed);
        }
        let loss_t = &self.nodes[loss.0].value;
        if !loss_t.is_scalar() {
            return Err(TapeError::NonScalarLoss(loss_t.shape().to_vec()));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<E>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(vec![E::one()]);

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            // Parents always precede node i, so split to borrow the incoming
            // gradient while accumulating into earlier nodes.
            let (earlier, rest) = grads.split_at_mut(i);
            let g = rest[0].as_ref().unwrap();
            self.backprop_node(i, g, earlier);
            // Interior gradients are not needed once propagated.
            rest[0] = None;
        }

        self.grads = grads;
        Ok(())
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn val(&self, v: Var) -> &[E] {
        self.nodes[v.0].value.data()
    }

    /// Accumulate `f`'s output into the gradient buffer of `target`.
    pub(crate) fn with_grad_buf(
        &self,
        grads: &mut [Option<Vec<E>>],
        target: Var,
        f: impl FnOnce(&mut [E]),
    ) {
        if !self.needs(target) {
            return;
        }
        let buf = grads[target.0]
            .get_or_insert_with(|| vec![E::zero(); self.nodes[target.0].value.numel()]);
        f(buf);
    }

    fn backprop_node(&self, i: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}

            Op::Add(a, b) => {
                self.with_grad_buf(grads, *a, |da| gemm::axpy(E::one(), g, da));
                self.with_grad_buf(grads, *b, |db| gemm::axpy(E::one(), g, db));
            }
            Op::Sub(a, b) => {
                self.with_grad_buf(grads, *a, |da| gemm::axpy(E::one(), g, da));
                self.with_grad_buf(grads, *b, |db| gemm::axpy(-E::one(), g, db));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                self.with_grad_buf(grads, *a, |da| {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * x;
                    }
                });
                self.with_grad_buf(grads, *b, |db| {
                    for ((d, &gv), &x) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                });
            }
            Op::Neg(a) => {
                self.with_grad_buf(grads, *a, |da| gemm::axpy(-E::one(), g, da));
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.with_grad_buf(grads, *a, |da| gemm::axpy(c, g, da));
            }
            Op::AddScalar { x, s } => {
                self.with_grad_buf(grads, *x, |dx| gemm::axpy(E::one(), g, dx));
                self.with_grad_buf(grads, *s, |ds| ds[0] += g.iter().copied().sum());
            }
            Op::Exp(a) => {
                self.with_grad_buf(grads, *a, |da| {
                    for ((d, &gv), &o) in da.iter_mut().zip(g).zip(out) {
                        *d += gv * o;
                    }
                });
            }
            Op::Ln(a) => {
                let av = self.val(*a);
                self.with_grad_buf(grads, *a, |da| {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(av) {
                        *d += gv / x;
                    }
                });
            }
            Op::ClampMin(a, c) => {
                let (av, c) = (self.val(*a), *c);
                self.with_grad_buf(grads, *a, |da| {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(av) {
                        if x >= c {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.val(*a);
                self.with_grad_buf(grads, *a, |da| {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(av) {
                        if x > E::zero() {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Elu(a) => {
                let av = self.val(*a);
                self.with_grad_buf(grads, *a, |da| {
                    for (((d, &gv), &x), &o) in da.iter_mut().zip(g).zip(av).zip(out) {
                        *d += if x > E::zero() { gv } else { gv * (o + E::one()) };
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let (av, slope) = (self.val(*a), *slope);
                self.with_grad_buf(grads, *a, |da| {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(av) {
                        *d += if x > E::zero() { gv } else { gv * slope };
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.with_grad_buf(grads, *x, |dx| {
                    for ((d, &gv), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                });
            }

            Op::Reshape(a) => {
                self.with_grad_buf(grads, *a, |da| gemm::axpy(E::one(), g, da));
            }
            Op::StackRows(parts) => {
                let d = out_shape[1];
                for (r, part) in parts.iter().enumerate() {
                    self.with_grad_buf(grads, *part, |dp| {
                        gemm::axpy(E::one(), &g[r * d..(r + 1) * d], dp);
                    });
                }
            }
            Op::GatherStackRows(parts) => {
                let d = out_shape[1];
                for (r, (part, row)) in parts.iter().enumerate() {
                    self.with_grad_buf(grads, *part, |dp| {
                        gemm::axpy(E::one(), &g[r * d..(r + 1) * d], &mut dp[row * d..(row + 1) * d]);
                    });
                }
            }
            Op::ConcatCols(a, b) => {
                let rows = out_shape[0];
                let ca = self.nodes[a.0].value.shape()[1];
                let cb = self.nodes[b.0].value.shape()[1];
                let c = ca + cb;
                self.with_grad_buf(grads, *a, |da| {
                    for r in 0..rows {
                        gemm::axpy(E::one(), &g[r * c..r * c + ca], &mut da[r * ca..(r + 1) * ca]);
                    }
                });
                self.with_grad_buf(grads, *b, |db| {
                    for r in 0..rows {
                        gemm::axpy(E::one(), &g[r * c + ca..(r + 1) * c], &mut db[r * cb..(r + 1) * cb]);
                    }
                });
            }
            Op::SliceCols { x, from, to } => {
                let rows = out_shape[0];
                let w = to - from;
                let c = self.nodes[x.0].value.shape()[1];
                self.with_grad_buf(grads, *x, |dx| {
                    for r in 0..rows {
                        gemm::axpy(E::one(), &g[r * w..(r + 1) * w], &mut dx[r * c + from..r * c + to]);
                    }
                });
            }
            Op::SliceRows { x, from, .. } => {
                let w: usize = out_shape[1..].iter().product();
                let start = from * w;
                self.with_grad_buf(grads, *x, |dx| {
                    gemm::axpy(E::one(), g, &mut dx[start..start + g.len()]);
                });
            }
            Op::RepeatRow { v, n } => {
                let d = self.nodes[v.0].value.numel();
                self.with_grad_buf(grads, *v, |dv| {
                    for r in 0..*n {
                        gemm::axpy(E::one(), &g[r * d..(r + 1) * d], dv);
                    }
                });
            }
            Op::MeanRows(a) => {
                let rows = self.nodes[a.0].value.shape()[0];
                let d = out.len();
                let scale = E::one() / E::from_f64(rows as f64);
                self.with_grad_buf(grads, *a, |da| {
                    for r in 0..rows {
                        gemm::axpy(scale, g, &mut da[r * d..(r + 1) * d]);
                    }
                });
            }

            Op::SumAll(a) => {
                self.with_grad_buf(grads, *a, |da| {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.numel();
                let gv = g[0] / E::from_f64(n as f64);
                self.with_grad_buf(grads, *a, |da| {
                    for d in da.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(out_shape, *axis);
                self.with_grad_buf(grads, *x, |dx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let mut dot = E::zero();
                            for a in 0..len {
                                let f = base + a * inner;
                                dot += g[f] * out[f];
                            }
                            for a in 0..len {
                                let f = base + a * inner;
                                dx[f] += out[f] * (g[f] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = split_axis(out_shape, *axis);
                self.with_grad_buf(grads, *x, |dx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let mut gsum = E::zero();
                            for a in 0..len {
                                gsum += g[base + a * inner];
                            }
                            for a in 0..len {
                                let f = base + a * inner;
                                dx[f] += g[f] - out[f].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::NormalizeSum(a) => {
                let av = self.val(*a);
                let s: E = av.iter().copied().sum();
                let gdot: E = g.iter().zip(out).map(|(&gv, &o)| gv * o).sum();
                self.with_grad_buf(grads, *a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += (gv - gdot) / s;
                    }
                });
            }
            Op::PickNegSum { logp, targets } => {
                let n = self.nodes[logp.0].value.shape()[1];
                self.with_grad_buf(grads, *logp, |dl| {
                    for (i, &t) in targets.iter().enumerate() {
                        dl[i * n + t] -= g[0];
                    }
                });
            }

            Op::MatMul(a, b) => {
                let (m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[1];
                let (av, bv) = (self.val(*a), self.val(*b));
                self.with_grad_buf(grads, *a, |da| gemm::mm_a_bt_acc(g, bv, da, m, n, k));
                self.with_grad_buf(grads, *b, |db| gemm::mm_at_b_acc(av, g, db, m, k, n));
            }
            Op::Linear { x, w, b } => {
                let (bsz, din) = {
                    let s = self.nodes[x.0].value.shape();
                    (s[0], s[1])
                };
                let dout = self.nodes[b.0].value.numel();
                let (xv, wv) = (self.val(*x), self.val(*w));
                self.with_grad_buf(grads, *x, |dx| gemm::mm_a_bt_acc(g, wv, dx, bsz, dout, din));
                self.with_grad_buf(grads, *w, |dw| gemm::mm_at_b_acc(xv, g, dw, bsz, din, dout));
                self.with_grad_buf(grads, *b, |db| {
                    for r in 0..bsz {
                        gemm::axpy(E::one(), &g[r * dout..(r + 1) * dout], db);
                    }
                });
            }
            Op::MatVec(m, v) => {
                let (rows, cols) = {
                    let s = self.nodes[m.0].value.shape();
                    (s[0], s[1])
                };
                let (mv, vv) = (self.val(*m), self.val(*v));
                self.with_grad_buf(grads, *m, |dm| {
                    for r in 0..rows {
                        gemm::axpy(g[r], vv, &mut dm[r * cols..(r + 1) * cols]);
                    }
                });
                self.with_grad_buf(grads, *v, |dv| {
                    for r in 0..rows {
                        gemm::axpy(g[r], &mv[r * cols..(r + 1) * cols], dv);
                    }
                });
            }
            Op::VecMat(v, m) => {
                let (rows, cols) = {
                    let s = self.nodes[m.0].value.shape();
                    (s[0], s[1])
                };
                let (vv, mv) = (self.val(*v), self.val(*m));
                self.with_grad_buf(grads, *v, |dv| {
                    for r in 0..rows {
                        dv[r] += gemm::dot(g, &mv[r * cols..(r + 1) * cols]);
                    }
                });
                self.with_grad_buf(grads, *m, |dm| {
                    for r in 0..rows {
                        gemm::axpy(vv[r], g, &mut dm[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::PairwiseSqDist(x, y) => {
                let (q, d) = {
                    let s = self.nodes[x.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[y.0].value.shape()[0];
                let (xv, yv) = (self.val(*x), self.val(*y));
                let two = E::from_f64(2.0);
                self.with_grad_buf(grads, *x, |dx| {
                    for qi in 0..q {
                        for ni in 0..n {
                            let gv = two * g[qi * n + ni];
                            if gv == E::zero() {
                                continue;
                            }
                            for k in 0..d {
                                dx[qi * d + k] += gv * (xv[qi * d + k] - yv[ni * d + k]);
                            }
                        }
                    }
                });
                self.with_grad_buf(grads, *y, |dy| {
                    for qi in 0..q {
                        for ni in 0..n {
                            let gv = two * g[qi * n + ni];
                            if gv == E::zero() {
                                continue;
                            }
                            for k in 0..d {
                                dy[ni * d + k] += gv * (yv[ni * d + k] - xv[qi * d + k]);
                            }
                        }
                    }
                });
            }
            Op::PairwiseCosDist(x, y) => {
                probops::backward_cos_dist(self, *x, *y, g, grads);
            }

            Op::Conv2d { input, kernel, stride, padding } => {
                conv::backward_conv2d(self, *input, *kernel, *stride, *padding, out_shape, g, grads);
            }
            Op::BiasAddChannel(x, b) => {
                let c = self.nodes[b.0].value.numel();
                self.with_grad_buf(grads, *x, |dx| gemm::axpy(E::one(), g, dx));
                self.with_grad_buf(grads, *b, |db| {
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % c] += gv;
                    }
                });
            }
            Op::MaxPool2d { input, argmax } => {
                self.with_grad_buf(grads, *input, |dx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += g[o];
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, eps, mean, var, training } => {
                conv::backward_batchnorm(
                    self, *x, *gamma, *beta, *eps, mean, var, *training, g, grads,
                );
            }

            Op::MixtureRsample { means, logvars, noise, comp_of_row } => {
                probops::backward_mixture_rsample(self, *means, *logvars, noise, comp_of_row, g, grads);
            }
            Op::GaussMixLogDensity { xs, means, logvars, log_weights } => {
                probops::backward_mix_log_density(self, *xs, *means, *logvars, *log_weights, out, g, grads);
            }
            Op::GaussLogDensityMat { xs, means, logvars } => {
                probops::backward_log_density_mat(self, *xs, *means, *logvars, g, grads);
            }
            Op::GaussKlBatch { q_mean, q_logvar, p_means, p_logvars } => {
                probops::backward_kl_batch(self, *q_mean, *q_logvar, *p_means, *p_logvars, g, grads);
            }
        }
    }
}

/// Decompose a shape around `axis` into (outer, axis_len, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
