//! Reverse-mode differentiation over an explicit per-forward-pass record.
//!
//! A [`Tape`] borrows a [`ParamStore`] for the duration of one forward pass and
//! appends a node per primitive operation. Each node keeps its output value and
//! whatever it needs to replay its adjoint. [`Tape::backward`] walks the nodes in
//! reverse and accumulates parameter gradients into a [`Gradients`] buffer.
//!
//! Besides the elementwise primitives, callers can push fused operations through
//! [`Tape::push_custom`]; the recurrent cells use this to record a whole cell step
//! as one node.

use std::rc::Rc;

use super::matrix::{dot, norm, sigmoid_scalar, softmax, Matrix};
use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adjoint rule of a fused operation.
pub trait Adjoint {
    /// Propagates `upstream` (the gradient w.r.t. this node's output) to the
    /// node's inputs and parameters.
    fn backward(&self, ctx: &mut BackwardCtx<'_>, upstream: &[f64]);
}

/// Gradient sinks handed to [`Adjoint::backward`].
pub struct BackwardCtx<'a> {
    params: &'a ParamStore,
    node_grads: &'a mut [Option<Vec<f64>>],
    sizes: &'a [usize],
    param_grads: &'a mut Gradients,
}

impl BackwardCtx<'_> {
    pub fn params(&self) -> &ParamStore {
        self.params
    }

    /// Gradient buffer of an input node, allocated on first use.
    pub fn node_grad(&mut self, var: Var) -> &mut [f64] {
        let len = self.sizes[var.0];
        self.node_grads[var.0].get_or_insert_with(|| vec![0.0; len])
    }

    pub fn add_to(&mut self, var: Var, g: &[f64]) {
        for (a, b) in self.node_grad(var).iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn param_grad(&mut self, id: ParamId) -> &mut [f64] {
        self.param_grads.get_mut(id)
    }

    /// Splits borrows so a parameter value and its gradient buffer can be used together.
    pub fn param_and_grad(&mut self, id: ParamId) -> (&Matrix, &mut [f64]) {
        (self.params.get(id), self.param_grads.get_mut(id))
    }
}

enum Op {
    Input,
    Param(ParamId),
    MatVec { w: ParamId, x: Var },
    Linear { w: ParamId, b: ParamId, x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Sum(Var),
    Dot(Var, Var),
    SumSquares(Var),
    WeightedMean { a: Var, b: Var, wa: f64, wb: f64 },
    RelativeError { x: Var, target: Rc<[f64]>, denom: f64 },
    CosineSimilarity { x: Var, target: Rc<[f64]> },
    Custom(Box<dyn Adjoint>),
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

/// The per-forward-pass differentiation record.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Floor applied to `‖target‖` by [`Tape::relative_error`].
pub const REL_ERROR_FLOOR: f64 = 1e-12;

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(1024),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return Err(Error::shape(op, format!("length {la}"), format!("length {lb}")));
        }
        Ok(())
    }

    /// Pushes a fused node. `value` is its output; `adjoint` replays the gradient.
    pub fn push_custom(&mut self, value: Vec<f64>, adjoint: Box<dyn Adjoint>) -> Var {
        self.push(value, Op::Custom(adjoint))
    }

    /// Constant leaf (no gradient flows out of the tape through it).
    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Input)
    }

    /// A parameter used directly as a vector (biases).
    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).values().to_vec();
        self.push(value, Op::Param(id))
    }

    pub fn matvec(&mut self, w: ParamId, x: Var) -> Result<Var> {
        let value = self.params.get(w).matvec(self.value(x))?;
        Ok(self.push(value, Op::MatVec { w, x }))
    }

    /// `w · x + b`
    pub fn linear(&mut self, w: ParamId, b: ParamId, x: Var) -> Result<Var> {
        let mut value = self.params.get(w).matvec(self.value(x))?;
        let bias = self.params.get(b);
        if bias.len() != value.len() {
            return Err(Error::shape("linear", format!("bias of length {}", value.len()), bias.len()));
        }
        for (v, b) in value.iter_mut().zip(bias.values()) {
            *v += b;
        }
        Ok(self.push(value, Op::Linear { w, b, x }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * s).collect();
        self.push(value, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().copied().map(sigmoid_scalar).collect();
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(value, Op::Tanh(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax(self.value(a));
        self.push(value, Op::Softmax(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let value = parts.iter().flat_map(|p| self.value(*p).iter().copied()).collect();
        self.push(value, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        if start + len > src.len() {
            return Err(Error::shape("slice", format!("at least {} entries", start + len), src.len()));
        }
        let value = src[start..start + len].to_vec();
        Ok(self.push(value, Op::Slice { x, start }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = vec![self.value(a).iter().sum()];
        self.push(value, Op::Sum(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("dot", a, b)?;
        let value = vec![dot(self.value(a), self.value(b))];
        Ok(self.push(value, Op::Dot(a, b)))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = vec![self.value(a).iter().map(|x| x * x).sum()];
        self.push(value, Op::SumSquares(a))
    }

    /// `(wa·a + wb·b) / (wa + wb)`
    pub fn weighted_mean(&mut self, a: Var, b: Var, wa: f64, wb: f64) -> Result<Var> {
        self.check_same("weighted_mean", a, b)?;
        if wa + wb == 0.0 {
            return Err(Error::usage("weighted_mean needs a nonzero total weight"));
        }
        let t = wa + wb;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (wa * x + wb * y) / t)
            .collect();
        Ok(self.push(value, Op::WeightedMean { a, b, wa, wb }))
    }

    /// `‖target − x‖ / ‖target‖` with the denominator floored at [`REL_ERROR_FLOOR`].
    pub fn relative_error(&mut self, target: Rc<[f64]>, x: Var) -> Result<Var> {
        if target.len() != self.value(x).len() {
            return Err(Error::shape("relative_error", target.len(), self.value(x).len()));
        }
        let denom = norm(&target).max(REL_ERROR_FLOOR);
        let diff: f64 = target
            .iter()
            .zip(self.value(x))
            .map(|(t, v)| (t - v) * (t - v))
            .sum::<f64>()
            .sqrt();
        Ok(self.push(vec![diff / denom], Op::RelativeError { x, target, denom }))
    }

    /// `target·x / (‖target‖‖x‖)`, defined as 0 when either norm vanishes.
    pub fn cosine_similarity(&mut self, target: Rc<[f64]>, x: Var) -> Result<Var> {
        if target.len() != self.value(x).len() {
            return Err(Error::shape("cosine_similarity", target.len(), self.value(x).len()));
        }
        let (nt, nx) = (norm(&target), norm(self.value(x)));
        let value = if nt == 0.0 || nx == 0.0 {
            0.0
        } else {
            dot(&target, self.value(x)) / (nt * nx)
        };
        Ok(self.push(vec![value], Op::CosineSimilarity { x, target }))
    }

    /// Gradient of a scalar node w.r.t. every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got a node of length {}",
                self.value(loss).len()
            )));
        }
        let mut grads = Gradients::zeros_like(self.params);
        self.backward_seeded(&[(loss, vec![1.0])], &mut grads)?;
        Ok(grads)
    }

    /// Accumulates into `grads` the parameter gradient of `Σ ⟨seedᵢ, nodeᵢ⟩`.
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<f64>)], grads: &mut Gradients) -> Result<()> {
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        let mut node_grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (var, seed) in seeds {
            if seed.len() != sizes[var.0] {
                return Err(Error::shape("backward seed", sizes[var.0], seed.len()));
            }
            let g = node_grads[var.0].get_or_insert_with(|| vec![0.0; seed.len()]);
            for (a, b) in g.iter_mut().zip(seed) {
                *a += b;
            }
            last = last.max(var.0 + 1);
        }

        for i in (0..last).rev() {
            let Some(g) = node_grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut ctx = BackwardCtx {
                params: self.params,
                node_grads: &mut node_grads,
                sizes: &sizes,
                param_grads: grads,
            };
            self.adjoint(node, &g, &mut ctx);
        }
        Ok(())
    }

    fn adjoint(&self, node: &Node, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                for (a, b) in ctx.param_grad(*id).iter_mut().zip(g) {
                    *a += b;
                }
            }
            Op::MatVec { w, x } => self.matvec_adjoint(*w, *x, g, ctx),
            Op::Linear { w, b, x } => {
                for (a, v) in ctx.param_grad(*b).iter_mut().zip(g) {
                    *a += v;
                }
                self.matvec_adjoint(*w, *x, g, ctx);
            }
            Op::Add(a, b) => {
                ctx.add_to(*a, g);
                ctx.add_to(*b, g);
            }
            Op::Sub(a, b) => {
                ctx.add_to(*a, g);
                for (x, v) in ctx.node_grad(*b).iter_mut().zip(g) {
                    *x -= v;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                for ((x, v), o) in ctx.node_grad(*a).iter_mut().zip(g).zip(vb) {
                    *x += v * o;
                }
                for ((x, v), o) in ctx.node_grad(*b).iter_mut().zip(g).zip(va) {
                    *x += v * o;
                }
            }
            Op::Scale(a, s) => {
                for (x, v) in ctx.node_grad(*a).iter_mut().zip(g) {
                    *x += v * s;
                }
            }
            Op::Sigmoid(a) => {
                for ((x, v), y) in ctx.node_grad(*a).iter_mut().zip(g).zip(&node.value) {
                    *x += v * y * (1.0 - y);
                }
            }
            Op::Tanh(a) => {
                for ((x, v), y) in ctx.node_grad(*a).iter_mut().zip(g).zip(&node.value) {
                    *x += v * (1.0 - y * y);
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let inner = dot(g, y);
                for ((x, v), yi) in ctx.node_grad(*a).iter_mut().zip(g).zip(y) {
                    *x += yi * (v - inner);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    ctx.add_to(*p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::Slice { x, start } => {
                let dst = ctx.node_grad(*x);
                for (a, v) in dst[*start..*start + g.len()].iter_mut().zip(g) {
                    *a += v;
                }
            }
            Op::Sum(a) => {
                ctx.node_grad(*a).iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Dot(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                for (x, o) in ctx.node_grad(*a).iter_mut().zip(vb) {
                    *x += g[0] * o;
                }
                for (x, o) in ctx.node_grad(*b).iter_mut().zip(va) {
                    *x += g[0] * o;
                }
            }
            Op::SumSquares(a) => {
                let va = self.value(*a);
                for (x, o) in ctx.node_grad(*a).iter_mut().zip(va) {
                    *x += 2.0 * g[0] * o;
                }
            }
            Op::WeightedMean { a, b, wa, wb } => {
                let t = wa + wb;
                if *wa != 0.0 {
                    for (x, v) in ctx.node_grad(*a).iter_mut().zip(g) {
                        *x += v * wa / t;
                    }
                }
                if *wb != 0.0 {
                    for (x, v) in ctx.node_grad(*b).iter_mut().zip(g) {
                        *x += v * wb / t;
                    }
                }
            }
            Op::RelativeError { x, target, denom } => {
                let diff_norm = node.value[0] * denom;
                if diff_norm == 0.0 {
                    return;
                }
                let vx = self.value(*x);
                let k = g[0] / (denom * diff_norm);
                for ((a, xi), ti) in ctx.node_grad(*x).iter_mut().zip(vx).zip(target.iter()) {
                    *a += k * (xi - ti);
                }
            }
            Op::CosineSimilarity { x, target } => {
                let vx = self.value(*x);
                let (nt, nx) = (norm(target), norm(vx));
                if nt == 0.0 || nx == 0.0 {
                    return;
                }
                let c = node.value[0];
                for ((a, xi), ti) in ctx.node_grad(*x).iter_mut().zip(vx).zip(target.iter()) {
                    *a += g[0] * (ti / (nt * nx) - c * xi / (nx * nx));
                }
            }
            Op::Custom(adj) => adj.backward(ctx, g),
        }
    }

    fn matvec_adjoint(&self, w: ParamId, x: Var, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let vx = self.value(x);
        let (wm, wg) = ctx.param_and_grad(w);
        Matrix::outer_acc(wg, wm.cols(), g, vx);
        let wm = self.params.get(w);
        wm.matvec_t_acc(g, ctx.node_grad(x));
    }
}
