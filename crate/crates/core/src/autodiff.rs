//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only arena of nodes. Every node's inputs were
//! created before it, so the node index is a topological order and the graph
//! is acyclic by construction. Backward passes emit their gradients as new
//! nodes of the same graph; with `create_graph` set those nodes keep their
//! producing operations and can be differentiated again (double backprop).
//!
//! Conventions: ReLU'(0) = 0, |u|'(0) = 0, and gating factors (ReLU masks,
//! signs, clip masks) are treated as piecewise constant when differentiated
//! a second time.

use crate::tensor::{self, ConvGeometry, Gate, Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("seed shape {seed:?} does not match output shape {output:?}")]
    SeedShape {
        seed: Vec<usize>,
        output: Vec<usize>,
    },
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
    #[error("graph edge {from} -> {to} points forward; graph is not acyclic")]
    Cycle { from: usize, to: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gate { value: Var, by: Var, kind: Gate },
    AddBias { x: Var, bias: Var },
    ReduceBias(Var),
    BroadcastBias(Var),
    SumAll(Var),
    Fill(Var),
    RowSum(Var),
    BroadcastCols(Var),
    Exp(Var),
    LogSumExpRows(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Reshape(Var),
    Conv { x: Var, k: Var, geom: ConvGeometry },
    ConvGradInput { g: Var, k: Var, geom: ConvGeometry },
    ConvGradKernel { x: Var, g: Var, geom: ConvGeometry },
}

impl Op {
    /// Inputs that gradients flow into. Gate selectors are excluded.
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Scale(a, _)
            | Op::ReduceBias(a)
            | Op::SumAll(a)
            | Op::RowSum(a)
            | Op::Exp(a)
            | Op::LogSumExpRows(a)
            | Op::Reshape(a) => vec![a],
            Op::Gate { value, .. } => vec![value],
            Op::AddBias { x, bias } => vec![x, bias],
            Op::BroadcastBias(a) | Op::Fill(a) | Op::BroadcastCols(a) => vec![a],
            Op::Conv { x, k, .. } => vec![x, k],
            Op::ConvGradInput { g, k, .. } => vec![g, k],
            Op::ConvGradKernel { x, g, .. } => vec![x, g],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one backward pass, keyed by the requested nodes.
#[derive(Clone, Debug)]
pub struct GradientMap {
    entries: Vec<(Var, Var)>,
}

impl GradientMap {
    pub fn get(&self, wrt: Var) -> Option<Var> {
        self.entries
            .iter()
            .find(|(k, _)| *k == wrt)
            .map(|&(_, g)| g)
    }

    /// Gradient handles in the order they were requested.
    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|&(_, g)| g).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant copy of `v`, cut off from its history.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad =
            self.recording && op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::sub(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = tensor::scale(self.value(a), c);
        self.push(v, Op::Scale(a, c))
    }

    /// `value ⊙ kind(by)`, with `by` treated as constant.
    pub fn gate(&mut self, value: Var, by: Var, kind: Gate) -> Result<Var> {
        let v = tensor::gate(self.value(value), self.value(by), kind)?;
        Ok(self.push(v, Op::Gate { value, by, kind }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.gate(x, x, Gate::Positive).expect("same shape")
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.gate(x, x, Gate::Sign).expect("same shape")
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = tensor::add_bias(self.value(x), self.value(bias))?;
        Ok(self.push(v, Op::AddBias { x, bias }))
    }

    pub fn reduce_bias(&mut self, x: Var) -> Result<Var> {
        let v = tensor::reduce_bias(self.value(x))?;
        Ok(self.push(v, Op::ReduceBias(x)))
    }

    pub fn broadcast_bias(&mut self, bias: Var, shape: &[usize]) -> Result<Var> {
        let v = tensor::broadcast_bias(self.value(bias), shape)?;
        Ok(self.push(v, Op::BroadcastBias(bias)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = tensor::sum_all(self.value(x));
        self.push(v, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn fill(&mut self, scalar: Var, shape: &[usize]) -> Result<Var> {
        let s = self.value(scalar);
        if !s.is_scalar() {
            return Err(AutodiffError::NotScalar(s.shape().to_vec()));
        }
        let v = Tensor::full(shape.to_vec(), s.item());
        Ok(self.push(v, Op::Fill(scalar)))
    }

    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let v = tensor::row_sum(self.value(x))?;
        Ok(self.push(v, Op::RowSum(x)))
    }

    pub fn broadcast_cols(&mut self, x: Var, cols: usize) -> Result<Var> {
        let v = tensor::broadcast_cols(self.value(x), cols)?;
        Ok(self.push(v, Op::BroadcastCols(x)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let v = tensor::logsumexp_rows(self.value(x))?;
        Ok(self.push(v, Op::LogSumExpRows(x)))
    }

    /// Row-wise log-softmax of a `[n, q]` matrix.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let q = self.value(x).dim(1);
        let lse = self.logsumexp_rows(x)?;
        let lse = self.broadcast_cols(lse, q)?;
        self.sub(x, lse)
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b), ta, tb)?;
        Ok(self.push(v, Op::MatMul { a, b, ta, tb }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, geom: ConvGeometry) -> Result<Var> {
        let v = tensor::conv2d_raw(self.value(x), self.value(k), &geom)?;
        Ok(self.push(v, Op::Conv { x, k, geom }))
    }

    pub fn conv2d_grad_input(&mut self, g: Var, k: Var, geom: ConvGeometry) -> Result<Var> {
        let v = tensor::conv2d_grad_input(self.value(g), self.value(k), &geom)?;
        Ok(self.push(v, Op::ConvGradInput { g, k, geom }))
    }

    pub fn conv2d_grad_kernel(&mut self, x: Var, g: Var, geom: ConvGeometry) -> Result<Var> {
        let v = tensor::conv2d_grad_kernel(self.value(x), self.value(g), &geom)?;
        Ok(self.push(v, Op::ConvGradKernel { x, g, geom }))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownNode(v.0))
        }
    }

    /// Gradients of a scalar `output` with respect to each node in `wrt`.
    ///
    /// Nodes that `output` does not depend on get an exact zero gradient.
    pub fn backward(
        &mut self,
        output: Var,
        wrt: &[Var],
        create_graph: bool,
    ) -> Result<GradientMap> {
        self.check(output)?;
        let shape = self.value(output).shape().to_vec();
        if !self.value(output).is_scalar() {
            return Err(AutodiffError::NotScalar(shape));
        }
        let seed = self.constant(Tensor::full(shape, 1.0));
        self.vjp(output, seed, wrt, create_graph)
    }

    /// Vector-Jacobian product: gradients of `<seed, output>` with respect to `wrt`.
    pub fn vjp(
        &mut self,
        output: Var,
        seed: Var,
        wrt: &[Var],
        create_graph: bool,
    ) -> Result<GradientMap> {
        self.check(output)?;
        self.check(seed)?;
        for &w in wrt {
            self.check(w)?;
        }
        if self.value(seed).shape() != self.value(output).shape() {
            return Err(AutodiffError::SeedShape {
                seed: self.value(seed).shape().to_vec(),
                output: self.value(output).shape().to_vec(),
            });
        }

        // Nodes on a path from some wrt node to the output.
        let lo = wrt
            .iter()
            .map(|w| w.0)
            .min()
            .unwrap_or(output.0)
            .min(output.0);
        let span = output.0 + 1 - lo;
        let mut depends = vec![false; span];
        for &w in wrt {
            if w.0 <= output.0 {
                depends[w.0 - lo] = true;
            }
        }
        for i in lo..=output.0 {
            if depends[i - lo] || !self.nodes[i].requires_grad {
                continue;
            }
            for inp in self.nodes[i].op.inputs() {
                if inp.0 >= i {
                    return Err(AutodiffError::Cycle { from: i, to: inp.0 });
                }
                if inp.0 >= lo && depends[inp.0 - lo] {
                    depends[i - lo] = true;
                    break;
                }
            }
        }

        let prev = self.recording;
        self.recording = create_graph;
        let result = self.sweep(output, seed, lo, &depends);
        self.recording = prev;
        let grads = result?;

        let mut entries = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let g = match (w.0 >= lo && w.0 <= output.0)
                .then(|| grads[w.0 - lo])
                .flatten()
            {
                Some(g) => g,
                None => {
                    let z = Tensor::zeros(self.value(w).shape().to_vec());
                    self.constant(z)
                }
            };
            entries.push((w, g));
        }
        Ok(GradientMap { entries })
    }

    fn sweep(
        &mut self,
        output: Var,
        seed: Var,
        lo: usize,
        depends: &[bool],
    ) -> Result<Vec<Option<Var>>> {
        let mut grads: Vec<Option<Var>> = vec![None; depends.len()];
        if depends[output.0 - lo] {
            grads[output.0 - lo] = Some(if self.recording {
                seed
            } else {
                self.detach(seed)
            });
        }
        for i in (lo..=output.0).rev() {
            let Some(g) = grads[i - lo] else { continue };
            if !depends[i - lo] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let wanted = |v: Var| v.0 >= lo && depends[v.0 - lo];
            let mut contribs: Vec<(Var, Var)> = Vec::new();
            match op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    if wanted(a) {
                        contribs.push((a, g));
                    }
                    if wanted(b) {
                        contribs.push((b, g));
                    }
                }
                Op::Sub(a, b) => {
                    if wanted(a) {
                        contribs.push((a, g));
                    }
                    if wanted(b) {
                        contribs.push((b, self.scale(g, -1.0)));
                    }
                }
                Op::Mul(a, b) => {
                    if wanted(a) {
                        contribs.push((a, self.mul(g, b)?));
                    }
                    if wanted(b) {
                        contribs.push((b, self.mul(g, a)?));
                    }
                }
                Op::Scale(a, c) => {
                    if wanted(a) {
                        contribs.push((a, self.scale(g, c)));
                    }
                }
                Op::Gate { value, by, kind } => {
                    if wanted(value) {
                        contribs.push((value, self.gate(g, by, kind)?));
                    }
                }
                Op::AddBias { x, bias } => {
                    if wanted(x) {
                        contribs.push((x, g));
                    }
                    if wanted(bias) {
                        contribs.push((bias, self.reduce_bias(g)?));
                    }
                }
                Op::ReduceBias(x) => {
                    if wanted(x) {
                        let shape = self.value(x).shape().to_vec();
                        contribs.push((x, self.broadcast_bias(g, &shape)?));
                    }
                }
                Op::BroadcastBias(bias) => {
                    if wanted(bias) {
                        contribs.push((bias, self.reduce_bias(g)?));
                    }
                }
                Op::SumAll(x) => {
                    if wanted(x) {
                        let shape = self.value(x).shape().to_vec();
                        contribs.push((x, self.fill(g, &shape)?));
                    }
                }
                Op::Fill(scalar) => {
                    if wanted(scalar) {
                        let s = self.sum_all(g);
                        let shape = self.value(scalar).shape().to_vec();
                        contribs.push((scalar, self.reshape(s, &shape)?));
                    }
                }
                Op::RowSum(x) => {
                    if wanted(x) {
                        let cols = self.value(x).dim(1);
                        contribs.push((x, self.broadcast_cols(g, cols)?));
                    }
                }
                Op::BroadcastCols(x) => {
                    if wanted(x) {
                        contribs.push((x, self.row_sum(g)?));
                    }
                }
                Op::Exp(x) => {
                    if wanted(x) {
                        contribs.push((x, self.mul(g, Var(i))?));
                    }
                }
                Op::LogSumExpRows(x) => {
                    if wanted(x) {
                        let cols = self.value(x).dim(1);
                        let lse = self.broadcast_cols(Var(i), cols)?;
                        let shifted = self.sub(x, lse)?;
                        let softmax = self.exp(shifted);
                        let gb = self.broadcast_cols(g, cols)?;
                        contribs.push((x, self.mul(gb, softmax)?));
                    }
                }
                Op::MatMul { a, b, ta, tb } => {
                    if wanted(a) {
                        let ga = if ta {
                            self.matmul(b, g, tb, true)?
                        } else {
                            self.matmul(g, b, false, !tb)?
                        };
                        contribs.push((a, ga));
                    }
                    if wanted(b) {
                        let gb = if tb {
                            self.matmul(g, a, true, ta)?
                        } else {
                            self.matmul(a, g, !ta, false)?
                        };
                        contribs.push((b, gb));
                    }
                }
                Op::Reshape(x) => {
                    if wanted(x) {
                        let shape = self.value(x).shape().to_vec();
                        contribs.push((x, self.reshape(g, &shape)?));
                    }
                }
                Op::Conv { x, k, geom } => {
                    if wanted(x) {
                        contribs.push((x, self.conv2d_grad_input(g, k, geom)?));
                    }
                    if wanted(k) {
                        contribs.push((k, self.conv2d_grad_kernel(x, g, geom)?));
                    }
                }
                Op::ConvGradInput { g: go, k, geom } => {
                    if wanted(go) {
                        contribs.push((go, self.conv2d(g, k, geom)?));
                    }
                    if wanted(k) {
                        contribs.push((k, self.conv2d_grad_kernel(g, go, geom)?));
                    }
                }
                Op::ConvGradKernel { x, g: go, geom } => {
                    if wanted(x) {
                        contribs.push((x, self.conv2d_grad_input(go, g, geom)?));
                    }
                    if wanted(go) {
                        contribs.push((go, self.conv2d(x, g, geom)?));
                    }
                }
            }
            for (target, c) in contribs {
                let slot = &mut grads[target.0 - lo];
                *slot = Some(match *slot {
                    Some(prev) => self.add(prev, c)?,
                    None => c,
                });
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.leaf(s(3.0), true);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y, &[x], false).unwrap();
        assert_eq!(g.value(grads.get(x).unwrap()).item(), 6.0);
    }

    #[test]
    fn cube_second_derivative() {
        let mut g = Graph::new();
        let x = g.leaf(s(2.0), true);
        let x2 = g.mul(x, x).unwrap();
        let y = g.mul(x2, x).unwrap();
        let dy = g.backward(y, &[x], true).unwrap().get(x).unwrap();
        assert_eq!(g.value(dy).item(), 12.0);
        let d2y = g.backward(dy, &[x], false).unwrap().get(x).unwrap();
        assert_eq!(g.value(d2y).item(), 12.0);
    }

    #[test]
    fn first_order_gradient_is_not_differentiable_without_create_graph() {
        let mut g = Graph::new();
        let x = g.leaf(s(2.0), true);
        let y = g.mul(x, x).unwrap();
        let dy = g.backward(y, &[x], false).unwrap().get(x).unwrap();
        assert!(!g.requires_grad(dy));
        let d2y = g.backward(dy, &[x], false).unwrap().get(x).unwrap();
        assert_eq!(g.value(d2y).item(), 0.0);
    }

    #[test]
    fn relu_subgradient_convention() {
        for (x0, want) in [(-1.0, 0.0), (0.0, 0.0), (2.0, 1.0)] {
            let mut g = Graph::new();
            let x = g.leaf(s(x0), true);
            let y = g.relu(x);
            let d = g.backward(y, &[x], false).unwrap().get(x).unwrap();
            assert_eq!(g.value(d).item(), want, "relu'({x0})");
        }
    }

    #[test]
    fn abs_subgradient_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![-2.0, 0.0, 5.0]).unwrap(), true);
        let a = g.abs(x);
        let y = g.sum_all(a);
        let d = g.backward(y, &[x], false).unwrap().get(x).unwrap();
        assert_eq!(g.value(d).data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn unreachable_leaf_gets_exact_zero() {
        let mut g = Graph::new();
        let x = g.leaf(s(1.5), true);
        let other = g.leaf(Tensor::full(vec![2, 3], 4.0), true);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y, &[x, other], false).unwrap();
        let z = g.value(grads.get(other).unwrap());
        assert_eq!(z.shape(), &[2, 3]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2]), true);
        let y = g.scale(x, 2.0);
        assert!(matches!(
            g.backward(y, &[x], false),
            Err(AutodiffError::NotScalar(_))
        ));
    }

    #[test]
    fn backward_is_linear() {
        let build = |g: &mut Graph, x: Var, w: Var| -> (Var, Var) {
            let h = g.matmul(x, w, false, false).unwrap();
            let r = g.relu(h);
            let f = g.sum_all(r);
            let e = g.exp(h);
            let gg = g.mean_all(e);
            (f, gg)
        };
        let xt = Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6]).unwrap();
        let wt = Tensor::new(vec![3, 2], vec![0.7, -0.1, 0.2, 0.9, -0.4, 0.3]).unwrap();
        let (a, b) = (1.7, -0.6);

        let mut g = Graph::new();
        let x = g.leaf(xt.clone(), false);
        let w = g.leaf(wt.clone(), true);
        let (f, gg) = build(&mut g, x, w);
        let af = g.scale(f, a);
        let bg = g.scale(gg, b);
        let combo = g.add(af, bg).unwrap();
        let dc = g.backward(combo, &[w], false).unwrap().get(w).unwrap();
        let df = g.backward(f, &[w], false).unwrap().get(w).unwrap();
        let dg = g.backward(gg, &[w], false).unwrap().get(w).unwrap();
        let manual = tensor::add(
            &tensor::scale(g.value(df), a),
            &tensor::scale(g.value(dg), b),
        )
        .unwrap();
        assert!(g.value(dc).max_abs_diff(&manual) < 1e-12);
    }

    #[test]
    fn matmul_gradients_for_every_transpose_combination() {
        // d/dA sum(op(A) op(B)) against hand-derived closed forms
        let at = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let bt = Tensor::new(vec![3, 2], vec![0.5, -1., 2., 0., 1., 3.]).unwrap();
        for (ta, tb) in [(false, false), (true, true)] {
            let mut g = Graph::new();
            let a = g.leaf(at.clone(), true);
            let b = g.leaf(bt.clone(), true);
            let p = g.matmul(a, b, ta, tb).unwrap();
            let y = g.sum_all(p);
            let grads = g.backward(y, &[a, b], false).unwrap();
            let ga = g.value(grads.get(a).unwrap()).clone();
            let gb = g.value(grads.get(b).unwrap()).clone();
            assert_eq!(ga.shape(), at.shape());
            assert_eq!(gb.shape(), bt.shape());
            let ones = |r, c| Tensor::full(vec![r, c], 1.0);
            if !ta {
                // dA = 1 · B^T
                let want = tensor::matmul(&ones(2, 2), &bt, false, true).unwrap();
                assert_eq!(ga, want);
            } else {
                // dA = (1 · B)^T = B^T · 1
                let want = tensor::matmul(&bt, &ones(3, 3), true, false).unwrap();
                assert_eq!(ga, want);
            }
        }
        for (ta, tb) in [(false, true), (true, false)] {
            let a_shape = if ta { vec![3, 2] } else { vec![2, 3] };
            let b_shape = if tb { vec![2, 3] } else { vec![3, 2] };
            let mut g = Graph::new();
            let a = g.leaf(Tensor::full(a_shape.clone(), 0.5), true);
            let b = g.leaf(Tensor::full(b_shape.clone(), 2.0), true);
            let p = g.matmul(a, b, ta, tb).unwrap();
            let y = g.sum_all(p);
            let grads = g.backward(y, &[a, b], false).unwrap();
            // every entry of A meets 2 columns of B with value 2
            assert!(g
                .value(grads.get(a).unwrap())
                .data()
                .iter()
                .all(|&v| v == 4.0));
            assert!(g
                .value(grads.get(b).unwrap())
                .data()
                .iter()
                .all(|&v| v == 1.0));
            assert_eq!(g.value(grads.get(a).unwrap()).shape(), a_shape.as_slice());
        }
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let l = g.logsumexp_rows(x).unwrap();
        let y = g.sum_all(l);
        let d = g.backward(y, &[x], false).unwrap().get(x).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (j, &v) in g.value(d).data().iter().enumerate() {
            assert!((v - ((j + 1) as f64).exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn second_derivative_through_logsumexp() {
        // f(x) = lse(x, 0) = ln(1 + e^x); f'' = s(1 - s) with s = sigmoid(x)
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 1], vec![0.7]).unwrap(), true);
        // [x, 0] = x · [1, 0]
        let e = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let row = g.matmul(x, e, false, false).unwrap();
        let l = g.logsumexp_rows(row).unwrap();
        let y = g.sum_all(l);
        let d = g.backward(y, &[x], true).unwrap().get(x).unwrap();
        let dd = g.backward(d, &[x], false).unwrap().get(x).unwrap();
        let sgm = 1.0 / (1.0 + (-0.7f64).exp());
        assert!((g.value(dd).item() - sgm * (1.0 - sgm)).abs() < 1e-14);
    }
}
