//! Classification heads: the text-anchored cosine head and the plain linear
//! head it replaces in ablations.

use serde::Serialize;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use crate::vit::INIT_STD;

/// CLIP-convention logit scale of 100.
pub const DEFAULT_TAU: f64 = 0.01;

/// Linear map from image-embedding space (`d_v`) into text space (`d_l`).
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `d_l × d_v`
    pub weight: Tensor,
    /// `d_l`
    pub bias: Tensor,
}

impl Projection {
    pub const WEIGHT: &'static str = "head.W";
    pub const BIAS: &'static str = "head.b";

    pub fn init(d_v: usize, d_l: usize, seed: u64) -> Self {
        Projection {
            weight: rng::normal_tensor(&mut rng::stream(seed, "projection"), &[d_l, d_v], INIT_STD),
            bias: Tensor::zeros(&[d_l]),
        }
    }

    pub fn identity(d: usize) -> Self {
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        Projection {
            weight: Tensor::from_parts(vec![d, d], w),
            bias: Tensor::zeros(&[d]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// Learnable `C × d_v` classifier used when text is ablated.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearHead {
    pub const WEIGHT: &'static str = "cls_head.W";
    pub const BIAS: &'static str = "cls_head.b";

    pub fn init(d_v: usize, classes: usize, seed: u64) -> Self {
        LinearHead {
            weight: rng::normal_tensor(&mut rng::stream(seed, "linear_head"), &[classes, d_v], INIT_STD),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// `W·x_v + b` when `weights` is given, otherwise the identity (which needs
/// `d_v == d_l`).
pub fn project<T: Scalar>(tape: &mut Tape<T>, x_v: NodeId, weights: Option<(NodeId, NodeId)>, d_l: usize) -> Result<NodeId> {
    let d_v = tape.value(x_v).numel();
    match weights {
        Some((w, b)) => {
            let row = tape.reshape(x_v, vec![1, d_v])?;
            let y = tape.matmul_t(row, w)?;
            let y = tape.add(y, b)?;
            let d_out = tape.value(y).numel();
            tape.reshape(y, vec![d_out])
        }
        None if d_v == d_l => Ok(x_v),
        None => Err(Error::Config(format!(
            "projection disabled but image embedding width {d_v} differs from text width {d_l}"
        ))),
    }
}

/// Entry `c` is `cos(bank_c, x) / tau`.
pub fn cosine_logits<T: Scalar>(tape: &mut Tape<T>, x: NodeId, bank: NodeId, tau: f64) -> Result<NodeId> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let d = tape.value(x).numel();
    let classes = tape.shape(bank)[0];
    if tape.shape(bank) != [classes, d] {
        return Err(Error::Shape {
            op: "cosine-logits",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(bank).to_vec(),
        });
    }
    let row = tape.reshape(x, vec![1, d])?;
    let xn = tape.l2_normalize(row).map_err(|e| match e {
        Error::Invalid(_) => Error::Invalid("image embedding is the zero vector; cosine similarity undefined".into()),
        other => other,
    })?;
    let bn = tape.l2_normalize(bank)?;
    let cos = tape.matmul_t(xn, bn)?;
    let logits = tape.scale(cos, 1.0 / tau)?;
    tape.reshape(logits, vec![classes])
}

pub fn linear_logits<T: Scalar>(tape: &mut Tape<T>, x_v: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
    let d_v = tape.value(x_v).numel();
    let row = tape.reshape(x_v, vec![1, d_v])?;
    let y = tape.matmul_t(row, weight)?;
    let y = tape.add(y, bias)?;
    let c = tape.value(y).numel();
    tape.reshape(y, vec![c])
}

/// `−log softmax(logits)[label]`.
pub fn loss<T: Scalar>(tape: &mut Tape<T>, logits: NodeId, label: usize) -> Result<NodeId> {
    tape.cross_entropy(logits, label)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label: usize,
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl Prediction {
    pub fn from_logits<T: Scalar>(logits: &[T]) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::Invalid("empty logits".into()));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        let z: Vec<f64> = logits.iter().map(|v| v.to_f64()).collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let probs: Vec<f64> = e.iter().map(|v| v / s).collect();
        let label = argmax(&probs);
        Ok(Prediction { probs, label })
    }
}
