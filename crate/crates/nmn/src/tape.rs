//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] records every intermediate vector produced while a program
//! runs forward. Nodes can only reference earlier nodes, so the recording
//! order is already a topological order and the backward sweep is a single
//! reverse pass. Gradients are accumulated only for parameter layers
//! (addressed by [`ParamId`]); scene features and word embeddings enter as
//! constant leaves and receive adjoints but no stored gradient.
//!
//! The backward pass looks parameter weights up through [`ParamAccess`], so
//! the parameter store must not change between the forward recording and
//! the corresponding backward call.

use std::collections::BTreeMap;
use std::rc::Rc;

use thiserror::Error;

use crate::tensor::{Matrix, ShapeError, Vector};

/// Index of a parameter layer inside the registry that owns it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Source of parameter values during forward recording and backward sweeps.
pub trait ParamAccess {
    fn weight(&self, id: ParamId) -> &Matrix;
    fn bias(&self, id: ParamId) -> &Vector;
}

/// Handle to a value recorded on a tape. Only valid for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("loss node has length {len}, expected a scalar")]
    NonScalarLoss { len: usize },
    #[error("node {node} is not on this tape (length {tape_len})")]
    UnknownNode { node: usize, tape_len: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// y = W x + b with W, b owned by a parameter layer.
    Affine { layer: ParamId, x: NodeId },
    /// y = M x with a constant matrix (no gradient for M).
    MatVec { matrix: Rc<Matrix>, x: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Softmax { x: NodeId },
    Hadamard { a: NodeId, b: NodeId },
    ElemMin { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Concat { parts: Vec<NodeId> },
    MaxVal { x: NodeId },
    MinVal { x: NodeId },
    MeanVal { x: NodeId },
    Dot { a: NodeId, b: NodeId },
    OneMinus { x: NodeId },
    /// y_i = scale * x_i + shift; only the scale matters going backward.
    AffineConst { scale: f64, x: NodeId },
    Ln { x: NodeId },
    /// Scalar y = x[index].
    Pick { x: NodeId, index: usize },
    /// Scalar y = Σ_i weights_i x_i with constant weights.
    DotConst { weights: Vec<f64>, x: NodeId },
    /// out[hi] = g, out[lo] = 1 - g, all other entries zero.
    ScatterPair { gate: NodeId, hi: usize, lo: usize },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Gradient of one parameter layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vector,
}

/// Per-layer gradients keyed by [`ParamId`]. Layers never touched by the
/// recorded computation have no entry, which readers must treat as zero.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    layers: BTreeMap<usize, LayerGrad>,
}

impl GradStore {
    pub fn new() -> Self {
        GradStore::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&LayerGrad> {
        self.layers.get(&id.0)
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Iterates in ascending layer order, which keeps accumulation and
    /// parameter updates deterministic.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &LayerGrad)> {
        self.layers.iter().map(|(k, v)| (ParamId(*k), v))
    }

    fn entry(&mut self, id: ParamId, rows: usize, cols: usize) -> &mut LayerGrad {
        self.layers.entry(id.0).or_insert_with(|| LayerGrad {
            weight: Matrix::zeros(rows, cols),
            bias: Vector::zeros(rows),
        })
    }

    /// self += other, entrywise over every layer present in `other`.
    pub fn accumulate(&mut self, other: &GradStore) -> Result<(), ShapeError> {
        for (id, grad) in other.iter() {
            match self.layers.get_mut(&id.0) {
                Some(mine) => {
                    mine.weight.add_scaled(&grad.weight, 1.0)?;
                    mine.bias.add_scaled(&grad.bias, 1.0)?;
                }
                None => {
                    self.layers.insert(id.0, grad.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for grad in self.layers.values_mut() {
            grad.weight.scale(factor);
            grad.bias.scale(factor);
        }
    }
}

/// Result of a backward sweep: parameter gradients plus the adjoint of
/// every node, exposed for diagnostics and tests.
#[derive(Debug)]
pub struct BackwardResult {
    pub grads: GradStore,
    adjoints: Vec<Vec<f64>>,
}

impl BackwardResult {
    pub fn adjoint(&self, node: NodeId) -> &[f64] {
        &self.adjoints[node.0]
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, values: &[f64]) -> NodeId {
        self.push(values.to_vec(), Op::Leaf)
    }

    /// Records y = W x + b for a parameter layer. The caller passes the
    /// current weights; only `layer` is stored, so the same parameter store
    /// must back the later backward sweep.
    pub fn affine(
        &mut self,
        layer: ParamId,
        weight: &Matrix,
        bias: &Vector,
        x: NodeId,
    ) -> Result<NodeId, ShapeError> {
        let mut y = weight.matvec(self.val(x))?;
        if bias.len() != y.len() {
            return Err(ShapeError::Elementwise {
                op: "affine bias",
                left: y.len(),
                right: bias.len(),
            });
        }
        for (v, b) in y.iter_mut().zip(bias.as_slice()) {
            *v += b;
        }
        Ok(self.push(y, Op::Affine { layer, x }))
    }

    pub fn matvec(&mut self, matrix: Rc<Matrix>, x: NodeId) -> Result<NodeId, ShapeError> {
        let y = matrix.matvec(self.val(x))?;
        Ok(self.push(y, Op::MatVec { matrix, x }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.val(x).iter().map(|v| v.max(0.0)).collect();
        self.push(y, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.val(x).iter().map(|&v| stable_sigmoid(v)).collect();
        self.push(y, Op::Sigmoid { x })
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, ShapeError> {
        let xs = self.val(x);
        if xs.is_empty() {
            return Err(ShapeError::Empty { op: "softmax" });
        }
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut y: Vec<f64> = xs.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = y.iter().sum();
        for v in &mut y {
            *v /= sum;
        }
        Ok(self.push(y, Op::Softmax { x }))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ShapeError> {
        let (xa, xb) = (self.val(a), self.val(b));
        if xa.len() != xb.len() {
            return Err(ShapeError::Elementwise {
                op: "hadamard",
                left: xa.len(),
                right: xb.len(),
            });
        }
        let y = xa.iter().zip(xb).map(|(p, q)| p * q).collect();
        Ok(self.push(y, Op::Hadamard { a, b }))
    }

    pub fn elem_min(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ShapeError> {
        let (xa, xb) = (self.val(a), self.val(b));
        if xa.len() != xb.len() {
            return Err(ShapeError::Elementwise {
                op: "elementwise min",
                left: xa.len(),
                right: xb.len(),
            });
        }
        let y = xa.iter().zip(xb).map(|(p, q)| p.min(*q)).collect();
        Ok(self.push(y, Op::ElemMin { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ShapeError> {
        let (xa, xb) = (self.val(a), self.val(b));
        if xa.len() != xb.len() {
            return Err(ShapeError::Elementwise {
                op: "add",
                left: xa.len(),
                right: xb.len(),
            });
        }
        let y = xa.iter().zip(xb).map(|(p, q)| p + q).collect();
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ShapeError> {
        let (xa, xb) = (self.val(a), self.val(b));
        if xa.len() != xb.len() {
            return Err(ShapeError::Elementwise {
                op: "sub",
                left: xa.len(),
                right: xb.len(),
            });
        }
        let y = xa.iter().zip(xb).map(|(p, q)| p - q).collect();
        Ok(self.push(y, Op::Sub { a, b }))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, ShapeError> {
        if parts.is_empty() {
            return Err(ShapeError::Empty { op: "concat" });
        }
        let mut y = Vec::new();
        for p in parts {
            y.extend_from_slice(self.val(*p));
        }
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Scalar max over entries. Ties route the gradient to the first
    /// attaining index.
    pub fn max_val(&mut self, x: NodeId) -> Result<NodeId, ShapeError> {
        let xs = self.val(x);
        if xs.is_empty() {
            return Err(ShapeError::Empty { op: "max" });
        }
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(self.push(vec![m], Op::MaxVal { x }))
    }

    /// Scalar min over entries. Ties route the gradient to the first
    /// attaining index.
    pub fn min_val(&mut self, x: NodeId) -> Result<NodeId, ShapeError> {
        let xs = self.val(x);
        if xs.is_empty() {
            return Err(ShapeError::Empty { op: "min" });
        }
        let m = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(self.push(vec![m], Op::MinVal { x }))
    }

    pub fn mean_val(&mut self, x: NodeId) -> Result<NodeId, ShapeError> {
        let xs = self.val(x);
        if xs.is_empty() {
            return Err(ShapeError::Empty { op: "mean" });
        }
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        Ok(self.push(vec![m], Op::MeanVal { x }))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ShapeError> {
        let (xa, xb) = (self.val(a), self.val(b));
        if xa.len() != xb.len() {
            return Err(ShapeError::Elementwise {
                op: "dot",
                left: xa.len(),
                right: xb.len(),
            });
        }
        let y = xa.iter().zip(xb).map(|(p, q)| p * q).sum();
        Ok(self.push(vec![y], Op::Dot { a, b }))
    }

    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        let y = self.val(x).iter().map(|v| 1.0 - v).collect();
        self.push(y, Op::OneMinus { x })
    }

    pub fn scale(&mut self, factor: f64, x: NodeId) -> NodeId {
        self.affine_const(factor, 0.0, x)
    }

    pub fn add_const(&mut self, shift: f64, x: NodeId) -> NodeId {
        self.affine_const(1.0, shift, x)
    }

    pub fn affine_const(&mut self, scale: f64, shift: f64, x: NodeId) -> NodeId {
        let y = self.val(x).iter().map(|v| scale * v + shift).collect();
        self.push(y, Op::AffineConst { scale, x })
    }

    /// Natural log, entrywise. Inputs must be strictly positive; loss code
    /// guarantees this by adding a floor before the log.
    pub fn ln(&mut self, x: NodeId) -> Result<NodeId, ShapeError> {
        let xs = self.val(x);
        if let Some(index) = xs.iter().position(|v| *v <= 0.0) {
            return Err(ShapeError::NonFinite {
                what: "log input",
                index,
            });
        }
        let y = xs.iter().map(|v| v.ln()).collect();
        Ok(self.push(y, Op::Ln { x }))
    }

    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId, ShapeError> {
        let xs = self.val(x);
        if index >= xs.len() {
            return Err(ShapeError::IndexOutOfRange {
                op: "pick",
                index,
                len: xs.len(),
            });
        }
        let v = xs[index];
        Ok(self.push(vec![v], Op::Pick { x, index }))
    }

    pub fn dot_const(&mut self, weights: Vec<f64>, x: NodeId) -> Result<NodeId, ShapeError> {
        let xs = self.val(x);
        if weights.len() != xs.len() {
            return Err(ShapeError::Elementwise {
                op: "weighted sum",
                left: weights.len(),
                right: xs.len(),
            });
        }
        let y = weights.iter().zip(xs).map(|(w, v)| w * v).sum();
        Ok(self.push(vec![y], Op::DotConst { weights, x }))
    }

    /// Builds a length-`len` vector with `gate` at `hi`, `1 - gate` at `lo`
    /// and zero elsewhere. `gate` must be scalar.
    pub fn scatter_pair(
        &mut self,
        gate: NodeId,
        hi: usize,
        lo: usize,
        len: usize,
    ) -> Result<NodeId, ShapeError> {
        let g = self.val(gate);
        if g.len() != 1 {
            return Err(ShapeError::Elementwise {
                op: "scatter gate",
                left: g.len(),
                right: 1,
            });
        }
        if hi >= len || lo >= len || hi == lo {
            return Err(ShapeError::IndexOutOfRange {
                op: "scatter pair",
                index: hi.max(lo),
                len,
            });
        }
        let gv = g[0];
        let mut y = vec![0.0; len];
        y[hi] = gv;
        y[lo] = 1.0 - gv;
        Ok(self.push(y, Op::ScatterPair { gate, hi, lo }))
    }

    /// Reverse sweep from a scalar loss node. Returns per-layer parameter
    /// gradients and the adjoint of every node at or before the loss.
    pub fn backward<P: ParamAccess>(
        &self,
        params: &P,
        loss: NodeId,
    ) -> Result<BackwardResult, TapeError> {
        if loss.0 >= self.nodes.len() {
            return Err(TapeError::UnknownNode {
                node: loss.0,
                tape_len: self.nodes.len(),
            });
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TapeError::NonScalarLoss {
                len: self.nodes[loss.0].value.len(),
            });
        }

        let mut adjoints: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        adjoints[loss.0][0] = 1.0;
        let mut grads = GradStore::new();

        for id in (0..=loss.0).rev() {
            // Inputs always precede their consumer, so splitting at `id`
            // gives mutable access to input adjoints while reading this
            // node's own adjoint.
            let (earlier, current) = adjoints.split_at_mut(id);
            let adj = &current[0];
            if adj.iter().all(|v| *v == 0.0) {
                continue;
            }
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Affine { layer, x } => {
                    let w = params.weight(*layer);
                    let xv = &self.nodes[x.0].value;
                    let grad = grads.entry(*layer, w.rows(), w.cols());
                    grad.weight.add_outer(adj, xv)?;
                    for (g, a) in grad.bias.as_mut_slice().iter_mut().zip(adj) {
                        *g += a;
                    }
                    let dx = w.matvec_transposed(adj)?;
                    axpy(&mut earlier[x.0], &dx);
                }
                Op::MatVec { matrix, x } => {
                    let dx = matrix.matvec_transposed(adj)?;
                    axpy(&mut earlier[x.0], &dx);
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[x.0].value;
                    for i in 0..adj.len() {
                        if xv[i] > 0.0 {
                            earlier[x.0][i] += adj[i];
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    let s = &node.value;
                    for i in 0..adj.len() {
                        earlier[x.0][i] += adj[i] * s[i] * (1.0 - s[i]);
                    }
                }
                Op::Softmax { x } => {
                    let s = &node.value;
                    let inner: f64 = s.iter().zip(adj).map(|(p, a)| p * a).sum();
                    for i in 0..adj.len() {
                        earlier[x.0][i] += s[i] * (adj[i] - inner);
                    }
                }
                Op::Hadamard { a, b } => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    for i in 0..adj.len() {
                        earlier[a.0][i] += adj[i] * bv[i];
                    }
                    for i in 0..adj.len() {
                        earlier[b.0][i] += adj[i] * av[i];
                    }
                }
                Op::ElemMin { a, b } => {
                    // Ties send the gradient to the first argument.
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    for i in 0..adj.len() {
                        if av[i] <= bv[i] {
                            earlier[a.0][i] += adj[i];
                        } else {
                            earlier[b.0][i] += adj[i];
                        }
                    }
                }
                Op::Add { a, b } => {
                    axpy(&mut earlier[a.0], adj);
                    axpy(&mut earlier[b.0], adj);
                }
                Op::Sub { a, b } => {
                    axpy(&mut earlier[a.0], adj);
                    for (g, v) in earlier[b.0].iter_mut().zip(adj) {
                        *g -= v;
                    }
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        axpy(&mut earlier[p.0], &adj[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::MaxVal { x } => {
                    let xv = &self.nodes[x.0].value;
                    let arg = argmax_first(xv);
                    earlier[x.0][arg] += adj[0];
                }
                Op::MinVal { x } => {
                    let xv = &self.nodes[x.0].value;
                    let arg = argmin_first(xv);
                    earlier[x.0][arg] += adj[0];
                }
                Op::MeanVal { x } => {
                    let n = self.nodes[x.0].value.len() as f64;
                    for g in earlier[x.0].iter_mut() {
                        *g += adj[0] / n;
                    }
                }
                Op::Dot { a, b } => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    for i in 0..av.len() {
                        earlier[a.0][i] += adj[0] * bv[i];
                    }
                    for i in 0..bv.len() {
                        earlier[b.0][i] += adj[0] * av[i];
                    }
                }
                Op::OneMinus { x } => {
                    for (g, v) in earlier[x.0].iter_mut().zip(adj) {
                        *g -= v;
                    }
                }
                Op::AffineConst { scale, x, .. } => {
                    for (g, v) in earlier[x.0].iter_mut().zip(adj) {
                        *g += scale * v;
                    }
                }
                Op::Ln { x } => {
                    let xv = &self.nodes[x.0].value;
                    for i in 0..adj.len() {
                        earlier[x.0][i] += adj[i] / xv[i];
                    }
                }
                Op::Pick { x, index } => {
                    earlier[x.0][*index] += adj[0];
                }
                Op::DotConst { weights, x } => {
                    for (i, w) in weights.iter().enumerate() {
                        earlier[x.0][i] += adj[0] * w;
                    }
                }
                Op::ScatterPair { gate, hi, lo } => {
                    earlier[gate.0][0] += adj[*hi] - adj[*lo];
                }
            }
        }

        Ok(BackwardResult { grads, adjoints })
    }
}

fn axpy(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate().skip(1) {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

fn argmin_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate().skip(1) {
        if *v < xs[best] {
            best = i;
        }
    }
    best
}

/// Overflow-free logistic function.
fn stable_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
