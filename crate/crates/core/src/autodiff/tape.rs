use std::collections::{BTreeMap, BTreeSet};

use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn, transpose};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// The primitive operations the tape can record.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// `a·b`, or `a·bᵀ` with `transpose_b`. Both operands rank 2.
    MatMul { transpose_b: bool },
    /// Same-shape sum, or bias-row broadcast of a rank-1 right operand.
    Add,
    Mul,
    Scale(f64),
    ConcatRows,
    SliceRows { start: usize, end: usize },
    /// Inputs `[x, gain, bias]`, normalised over the last dimension.
    LayerNorm { eps: f64 },
    Gelu,
    SoftmaxLastDim,
    MeanRows,
    L2NormalizeLastDim,
    Transpose2d,
    CrossEntropy { label: usize },
    Sum,
    Reshape(Vec<usize>),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul { .. } => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "elementwise-mul",
            Primitive::Scale(_) => "scalar-scale",
            Primitive::ConcatRows => "concat-rows",
            Primitive::SliceRows { .. } => "slice-rows",
            Primitive::LayerNorm { .. } => "layer-norm",
            Primitive::Gelu => "gelu",
            Primitive::SoftmaxLastDim => "softmax-lastdim",
            Primitive::MeanRows => "mean-rows",
            Primitive::L2NormalizeLastDim => "l2-normalize-lastdim",
            Primitive::Transpose2d => "transpose-2d",
            Primitive::CrossEntropy { .. } => "cross-entropy-from-logits",
            Primitive::Sum => "sum",
            Primitive::Reshape(_) => "reshape",
        }
    }
}

/// Deliberate backward defects for negative-control tests of the gradient
/// checker.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    GeluDerivative,
}

#[derive(Debug, Clone)]
enum Saved<T: Scalar> {
    Nothing,
    LayerNorm { xhat: Vec<T>, inv_std: Vec<T> },
    RowNorms(Vec<T>),
    Probs(Vec<T>),
}

#[derive(Debug, Clone)]
struct Node<T: Scalar> {
    prim: Option<Primitive>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    saved: Saved<T>,
    trainable: bool,
}

/// Append-only record of a computation. Node ids are assigned in insertion
/// order, so every node's inputs precede it.
#[derive(Debug, Clone)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    fault: Option<BackwardFault>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    /// The primitive that produced `id`, or `None` for leaves.
    pub fn primitive(&self, id: NodeId) -> Option<&Primitive> {
        self.nodes.get(id).and_then(|n| n.prim.as_ref())
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes.get(id).is_some_and(|n| n.prim.is_none())
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes.get(id).is_some_and(|n| n.trainable)
    }

    pub fn trainable_leaves(&self) -> Vec<NodeId> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].trainable).collect()
    }

    fn push_leaf(&mut self, value: Tensor<T>, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            prim: None,
            inputs: Vec::new(),
            value,
            saved: Saved::Nothing,
            trainable,
        });
        self.nodes.len() - 1
    }

    /// A leaf that never receives updates (frozen weights, inputs, constants).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, false)
    }

    /// A leaf flagged trainable.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> NodeId {
        self.push_leaf(value, trainable)
    }

    /// Records `prim` applied to `inputs` and returns the new node.
    pub fn apply(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.nodes.len()) {
            return Err(Error::Invalid(format!("{}: unknown node {bad}", prim.name())));
        }
        let (value, saved) = self.forward(&prim, inputs)?;
        if !value.is_all_finite() {
            return Err(Error::NonFinite(format!(
                "{} output (node {})",
                prim.name(),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            prim: Some(prim),
            inputs: inputs.to_vec(),
            value,
            saved,
            trainable: false,
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul { transpose_b: false }, &[a, b])
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul { transpose_b: true }, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.apply(Primitive::Scale(k), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Primitive::ConcatRows, parts)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.apply(Primitive::SliceRows { start, end }, &[a])
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        self.apply(Primitive::LayerNorm { eps }, &[x, gain, bias])
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Gelu, &[a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::SoftmaxLastDim, &[a])
    }

    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MeanRows, &[a])
    }

    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::L2NormalizeLastDim, &[a])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Transpose2d, &[a])
    }

    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        self.apply(Primitive::CrossEntropy { label }, &[logits])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.apply(Primitive::Reshape(shape), &[a])
    }

    fn forward(&self, prim: &Primitive, inputs: &[NodeId]) -> Result<(Tensor<T>, Saved<T>)> {
        let arity = match prim {
            Primitive::MatMul { .. } | Primitive::Add | Primitive::Mul => Some(2),
            Primitive::LayerNorm { .. } => Some(3),
            Primitive::ConcatRows => None,
            _ => Some(1),
        };
        match arity {
            Some(n) if inputs.len() != n => {
                return Err(Error::Invalid(format!(
                    "{} takes {n} inputs, got {}",
                    prim.name(),
                    inputs.len()
                )))
            }
            None if inputs.is_empty() => {
                return Err(Error::Invalid("concat-rows needs at least one input".into()))
            }
            _ => {}
        }
        let v = |i: usize| &self.nodes[inputs[i]].value;
        let op = prim.name();
        let out = match prim {
            Primitive::MatMul { transpose_b } => {
                let (a, b) = (v(0), v(1));
                if a.rank() != 2 || b.rank() != 2 {
                    return Err(shape_err(op, a.shape(), b.shape()));
                }
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let mut c;
                if *transpose_b {
                    let (n, kb) = (b.shape()[0], b.shape()[1]);
                    if k != kb {
                        return Err(shape_err(op, a.shape(), b.shape()));
                    }
                    c = vec![T::ZERO; m * n];
                    gemm_nt(m, k, n, a.data(), b.data(), &mut c);
                    (Tensor::from_parts(vec![m, n], c), Saved::Nothing)
                } else {
                    let (kb, n) = (b.shape()[0], b.shape()[1]);
                    if k != kb {
                        return Err(shape_err(op, a.shape(), b.shape()));
                    }
                    c = vec![T::ZERO; m * n];
                    gemm_nn(m, k, n, a.data(), b.data(), &mut c);
                    (Tensor::from_parts(vec![m, n], c), Saved::Nothing)
                }
            }
            Primitive::Add => {
                let (a, b) = (v(0), v(1));
                if a.shape() == b.shape() {
                    let d = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
                    (Tensor::from_parts(a.shape().to_vec(), d), Saved::Nothing)
                } else if b.rank() == 1 && a.rank() >= 1 && a.last_dim() == b.numel() {
                    let w = b.numel();
                    let d = a
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x + b.data()[i % w])
                        .collect();
                    (Tensor::from_parts(a.shape().to_vec(), d), Saved::Nothing)
                } else {
                    return Err(shape_err(op, a.shape(), b.shape()));
                }
            }
            Primitive::Mul => {
                let (a, b) = (v(0), v(1));
                if a.shape() != b.shape() {
                    return Err(shape_err(op, a.shape(), b.shape()));
                }
                let d = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
                (Tensor::from_parts(a.shape().to_vec(), d), Saved::Nothing)
            }
            Primitive::Scale(k) => {
                let a = v(0);
                let k = T::from_f64(*k);
                let d = a.data().iter().map(|&x| x * k).collect();
                (Tensor::from_parts(a.shape().to_vec(), d), Saved::Nothing)
            }
            Primitive::ConcatRows => {
                let first = v(0);
                if first.rank() != 2 {
                    return Err(shape_err(op, first.shape(), &[]));
                }
                let cols = first.shape()[1];
                let mut rows = 0;
                let mut d = Vec::new();
                for &id in inputs {
                    let t = &self.nodes[id].value;
                    if t.rank() != 2 || t.shape()[1] != cols {
                        return Err(shape_err(op, first.shape(), t.shape()));
                    }
                    rows += t.shape()[0];
                    d.extend_from_slice(t.data());
                }
                (Tensor::from_parts(vec![rows, cols], d), Saved::Nothing)
            }
            Primitive::SliceRows { start, end } => {
                let a = v(0);
                if a.rank() != 2 || start >= end || *end > a.shape()[0] {
                    return Err(shape_err(op, a.shape(), &[*start, *end]));
                }
                let cols = a.shape()[1];
                let d = a.data()[start * cols..end * cols].to_vec();
                (Tensor::from_parts(vec![end - start, cols], d), Saved::Nothing)
            }
            Primitive::LayerNorm { eps } => {
                if !(*eps > 0.0) {
                    return Err(Error::Config(format!("layer-norm epsilon must be > 0, got {eps}")));
                }
                let (x, g, b) = (v(0), v(1), v(2));
                let n = x.last_dim();
                if x.rank() == 0 || x.rank() > 2 || g.shape() != [n] || b.shape() != [n] {
                    return Err(shape_err(op, x.shape(), g.shape()));
                }
                let rows = x.rows();
                let nf = T::from_f64(n as f64);
                let eps = T::from_f64(*eps);
                let mut xhat = vec![T::ZERO; x.numel()];
                let mut inv_std = vec![T::ZERO; rows];
                let mut y = vec![T::ZERO; x.numel()];
                for r in 0..rows {
                    let row = x.row(r);
                    let mut mean = T::ZERO;
                    for &e in row {
                        mean += e;
                    }
                    mean = mean / nf;
                    let mut var = T::ZERO;
                    for &e in row {
                        var += (e - mean) * (e - mean);
                    }
                    var = var / nf;
                    let inv = T::ONE / (var + eps).sqrt();
                    inv_std[r] = inv;
                    for j in 0..n {
                        let h = (row[j] - mean) * inv;
                        xhat[r * n + j] = h;
                        y[r * n + j] = h * g.data()[j] + b.data()[j];
                    }
                }
                (
                    Tensor::from_parts(x.shape().to_vec(), y),
                    Saved::LayerNorm { xhat, inv_std },
                )
            }
            Primitive::Gelu => {
                let a = v(0);
                let c = T::from_f64(GELU_C);
                let k = T::from_f64(GELU_A);
                let half = T::from_f64(0.5);
                let d = a
                    .data()
                    .iter()
                    .map(|&x| half * x * (T::ONE + (c * (x + k * x * x * x)).tanh()))
                    .collect();
                (Tensor::from_parts(a.shape().to_vec(), d), Saved::Nothing)
            }
            Primitive::SoftmaxLastDim => {
                let a = v(0);
                if a.rank() == 0 || a.rank() > 2 {
                    return Err(shape_err(op, a.shape(), &[]));
                }
                let mut d = Vec::with_capacity(a.numel());
                for r in 0..a.rows() {
                    softmax_row(a.row(r), &mut d);
                }
                (Tensor::from_parts(a.shape().to_vec(), d), Saved::Nothing)
            }
            Primitive::MeanRows => {
                let a = v(0);
                if a.rank() != 2 {
                    return Err(shape_err(op, a.shape(), &[]));
                }
                let (rows, cols) = (a.shape()[0], a.shape()[1]);
                let mut d = vec![T::ZERO; cols];
                for r in 0..rows {
                    for (acc, &e) in d.iter_mut().zip(a.row(r)) {
                        *acc += e;
                    }
                }
                let inv = T::ONE / T::from_f64(rows as f64);
                d.iter_mut().for_each(|e| *e *= inv);
                (Tensor::from_parts(vec![cols], d), Saved::Nothing)
            }
            Primitive::L2NormalizeLastDim => {
                let a = v(0);
                if a.rank() == 0 || a.rank() > 2 {
                    return Err(shape_err(op, a.shape(), &[]));
                }
                let mut norms = Vec::with_capacity(a.rows());
                let mut d = Vec::with_capacity(a.numel());
                for r in 0..a.rows() {
                    let row = a.row(r);
                    let norm = dot(row, row).sqrt();
                    if norm == T::ZERO {
                        return Err(Error::Invalid(format!(
                            "{op}: row {r} is the zero vector, cosine similarity undefined"
                        )));
                    }
                    norms.push(norm);
                    d.extend(row.iter().map(|&e| e / norm));
                }
                (Tensor::from_parts(a.shape().to_vec(), d), Saved::RowNorms(norms))
            }
            Primitive::Transpose2d => {
                let a = v(0);
                if a.rank() != 2 {
                    return Err(shape_err(op, a.shape(), &[]));
                }
                let (r, c) = (a.shape()[0], a.shape()[1]);
                (Tensor::from_parts(vec![c, r], transpose(r, c, a.data())), Saved::Nothing)
            }
            Primitive::CrossEntropy { label } => {
                let z = v(0);
                if z.rows() != 1 || z.rank() == 0 {
                    return Err(shape_err(op, z.shape(), &[]));
                }
                if *label >= z.numel() {
                    return Err(Error::Invalid(format!(
                        "{op}: label {label} out of range for {} classes",
                        z.numel()
                    )));
                }
                let zd = z.data();
                let m = zd.iter().copied().fold(zd[0], T::max);
                let mut s = T::ZERO;
                for &e in zd {
                    s += (e - m).exp();
                }
                let lse = m + s.ln();
                let probs: Vec<T> = zd.iter().map(|&e| (e - lse).exp()).collect();
                (
                    Tensor::from_parts(vec![], vec![lse - zd[*label]]),
                    Saved::Probs(probs),
                )
            }
            Primitive::Sum => {
                let a = v(0);
                let mut s = T::ZERO;
                for &e in a.data() {
                    s += e;
                }
                (Tensor::from_parts(vec![], vec![s]), Saved::Nothing)
            }
            Primitive::Reshape(shape) => (v(0).reshape(shape.clone())?, Saved::Nothing),
        };
        Ok(out)
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for exactly the
    /// `wanted` leaves. Nodes that cannot reach a wanted leaf are skipped.
    pub fn backward(&self, loss: NodeId, wanted: &[NodeId]) -> Result<BTreeMap<NodeId, Tensor<T>>> {
        let Some(loss_node) = self.nodes.get(loss) else {
            return Err(Error::Invalid(format!("backward: unknown loss node {loss}")));
        };
        if loss_node.value.numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let wanted_set: BTreeSet<NodeId> = wanted.iter().copied().collect();
        for &w in &wanted_set {
            if !self.is_leaf(w) {
                return Err(Error::Invalid(format!("backward: node {w} is not a leaf")));
            }
        }

        let mut need = vec![false; loss + 1];
        for i in 0..=loss {
            need[i] = wanted_set.contains(&i) || self.nodes[i].inputs.iter().any(|&p| need[p]);
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss + 1];
        if need[loss] {
            grads[loss] = Some(vec![T::ONE]);
        }
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.prim.is_none() {
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &need, &mut grads);
        }

        let mut out = BTreeMap::new();
        for &w in &wanted_set {
            let shape = self.nodes[w].value.shape().to_vec();
            let t = match grads.get_mut(w).and_then(Option::take) {
                Some(g) => Tensor::from_parts(shape, g),
                None => Tensor::zeros(&shape),
            };
            out.insert(w, t);
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], need: &[bool], grads: &mut [Option<Vec<T>>]) {
        let prim = node.prim.as_ref().expect("interior node");
        let inputs = &node.inputs;
        let val = |i: usize| &self.nodes[inputs[i]].value;
        let needs = |i: usize| need[inputs[i]];
        let mut emit = |i: usize, contrib: Vec<T>| accumulate(grads, inputs[i], contrib);

        match prim {
            Primitive::MatMul { transpose_b } => {
                let (a, b) = (val(0), val(1));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                if *transpose_b {
                    let n = b.shape()[0];
                    if needs(0) {
                        let mut da = vec![T::ZERO; m * k];
                        gemm_nn(m, n, k, g, b.data(), &mut da);
                        emit(0, da);
                    }
                    if needs(1) {
                        let mut db = vec![T::ZERO; n * k];
                        gemm_tn(n, m, k, g, a.data(), &mut db);
                        emit(1, db);
                    }
                } else {
                    let n = b.shape()[1];
                    if needs(0) {
                        let mut da = vec![T::ZERO; m * k];
                        gemm_nt(m, n, k, g, b.data(), &mut da);
                        emit(0, da);
                    }
                    if needs(1) {
                        let mut db = vec![T::ZERO; k * n];
                        gemm_tn(k, m, n, a.data(), g, &mut db);
                        emit(1, db);
                    }
                }
            }
            Primitive::Add => {
                let (a, b) = (val(0), val(1));
                if needs(0) {
                    emit(0, g.to_vec());
                }
                if needs(1) {
                    if a.shape() == b.shape() {
                        emit(1, g.to_vec());
                    } else {
                        let w = b.numel();
                        let mut db = vec![T::ZERO; w];
                        for (i, &e) in g.iter().enumerate() {
                            db[i % w] += e;
                        }
                        emit(1, db);
                    }
                }
            }
            Primitive::Mul => {
                let (a, b) = (val(0), val(1));
                if needs(0) {
                    emit(0, g.iter().zip(b.data()).map(|(&x, &y)| x * y).collect());
                }
                if needs(1) {
                    emit(1, g.iter().zip(a.data()).map(|(&x, &y)| x * y).collect());
                }
            }
            Primitive::Scale(k) => {
                if needs(0) {
                    let k = T::from_f64(*k);
                    emit(0, g.iter().map(|&x| x * k).collect());
                }
            }
            Primitive::ConcatRows => {
                let mut offset = 0;
                for i in 0..inputs.len() {
                    let len = val(i).numel();
                    if needs(i) {
                        emit(i, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Primitive::SliceRows { start, end } => {
                if needs(0) {
                    let a = val(0);
                    let cols = a.shape()[1];
                    let mut da = vec![T::ZERO; a.numel()];
                    da[start * cols..end * cols].copy_from_slice(g);
                    emit(0, da);
                }
            }
            Primitive::LayerNorm { .. } => {
                let Saved::LayerNorm { xhat, inv_std } = &node.saved else {
                    unreachable!("layer-norm without saved statistics")
                };
                let gain = val(1).data();
                let n = gain.len();
                let rows = inv_std.len();
                if needs(0) {
                    let nf = T::from_f64(n as f64);
                    let mut dx = vec![T::ZERO; rows * n];
                    for r in 0..rows {
                        let mut s1 = T::ZERO;
                        let mut s2 = T::ZERO;
                        for j in 0..n {
                            let dh = g[r * n + j] * gain[j];
                            s1 += dh;
                            s2 += dh * xhat[r * n + j];
                        }
                        let scale = inv_std[r] / nf;
                        for j in 0..n {
                            let dh = g[r * n + j] * gain[j];
                            dx[r * n + j] = scale * (nf * dh - s1 - xhat[r * n + j] * s2);
                        }
                    }
                    emit(0, dx);
                }
                if needs(1) {
                    let mut dg = vec![T::ZERO; n];
                    for r in 0..rows {
                        for j in 0..n {
                            dg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                    emit(1, dg);
                }
                if needs(2) {
                    let mut db = vec![T::ZERO; n];
                    for r in 0..rows {
                        for j in 0..n {
                            db[j] += g[r * n + j];
                        }
                    }
                    emit(2, db);
                }
            }
            Primitive::Gelu => {
                if needs(0) {
                    let c = T::from_f64(GELU_C);
                    let k = T::from_f64(GELU_A);
                    let k3 = T::from_f64(3.0 * GELU_A);
                    let half = T::from_f64(0.5);
                    let faulty = self.fault == Some(BackwardFault::GeluDerivative);
                    let dx = val(0)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &gy)| {
                            let t = (c * (x + k * x * x * x)).tanh();
                            let mut d = half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + k3 * x * x);
                            if faulty {
                                d = d * T::from_f64(1.1);
                            }
                            gy * d
                        })
                        .collect();
                    emit(0, dx);
                }
            }
            Primitive::SoftmaxLastDim => {
                if needs(0) {
                    let y = &node.value;
                    let w = y.last_dim();
                    let mut dx = vec![T::ZERO; y.numel()];
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * w..(r + 1) * w];
                        let s = dot(gr, yr);
                        for j in 0..w {
                            dx[r * w + j] = yr[j] * (gr[j] - s);
                        }
                    }
                    emit(0, dx);
                }
            }
            Primitive::MeanRows => {
                if needs(0) {
                    let a = val(0);
                    let rows = a.shape()[0];
                    let inv = T::ONE / T::from_f64(rows as f64);
                    let scaled: Vec<T> = g.iter().map(|&x| x * inv).collect();
                    emit(0, scaled.repeat(rows));
                }
            }
            Primitive::L2NormalizeLastDim => {
                if needs(0) {
                    let Saved::RowNorms(norms) = &node.saved else {
                        unreachable!("l2-normalize without saved norms")
                    };
                    let y = &node.value;
                    let w = y.last_dim();
                    let mut dx = vec![T::ZERO; y.numel()];
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * w..(r + 1) * w];
                        let s = dot(gr, yr);
                        for j in 0..w {
                            dx[r * w + j] = (gr[j] - yr[j] * s) / norms[r];
                        }
                    }
                    emit(0, dx);
                }
            }
            Primitive::Transpose2d => {
                if needs(0) {
                    let s = node.value.shape();
                    emit(0, transpose(s[0], s[1], g));
                }
            }
            Primitive::CrossEntropy { label } => {
                if needs(0) {
                    let Saved::Probs(p) = &node.saved else {
                        unreachable!("cross-entropy without saved probabilities")
                    };
                    let mut dz: Vec<T> = p.iter().map(|&e| e * g[0]).collect();
                    dz[*label] -= g[0];
                    emit(0, dz);
                }
            }
            Primitive::Sum => {
                if needs(0) {
                    emit(0, vec![g[0]; val(0).numel()]);
                }
            }
            Primitive::Reshape(_) => {
                if needs(0) {
                    emit(0, g.to_vec());
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, contrib: Vec<T>) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut Vec<T>) {
    let m = row.iter().copied().fold(row[0], T::max);
    let start = out.len();
    let mut s = T::ZERO;
    for &e in row {
        let x = (e - m).exp();
        s += x;
        out.push(x);
    }
    for x in &mut out[start..] {
        *x = *x / s;
    }
}
