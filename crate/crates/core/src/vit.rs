//! Pre-norm vision transformer with optional input-space prompt tokens.
//!
//! Token layout entering the first layer is `[CLS, prompts…, patches…]`. The
//! CLS row carries positional embedding 0 and patch row `i` carries positional
//! embedding `i + 1`; prompt rows carry none. The image embedding is the CLS
//! row of the last layer, layer-normalised by `ln_post` (unless
//! `final_norm` is off) and mapped through `proj.weight` when `d_v != d_tok`.
//!
//! Weight files use the canonical tensor names returned by
//! [`ViTConfig::tensor_specs`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::ctns;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub const INIT_STD: f32 = 0.02;

fn default_ln_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_tok: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub d_v: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    /// Layer norm on the final CLS row before the output projection.
    #[serde(default = "default_final_norm")]
    pub final_norm: bool,
}

fn default_final_norm() -> bool {
    true
}

const PATCH_W: usize = 0;
const PATCH_B: usize = 1;
const CLS: usize = 2;
const POS: usize = 3;
const PER_LAYER: usize = 12;

const LN1_G: usize = 0;
const LN1_B: usize = 1;
const QKV_W: usize = 2;
const QKV_B: usize = 3;
const OUT_W: usize = 4;
const OUT_B: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const FC1_W: usize = 8;
const FC1_B: usize = 9;
const FC2_W: usize = 10;
const FC2_B: usize = 11;

fn slot(layer: usize, offset: usize) -> usize {
    4 + layer * PER_LAYER + offset
}

impl ViTConfig {
    /// Desk-scale profile: 32×32×3 images, 8×8 patches, 4 layers of width 64.
    pub fn desk() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            d_tok: 64,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            d_v: 32,
            ln_eps: default_ln_eps(),
            final_norm: true,
        }
    }

    /// ViT-B/16 geometry with a 512-wide output projection.
    pub fn vit_b16() -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            d_tok: 768,
            layers: 12,
            heads: 12,
            mlp_ratio: 4,
            d_v: 512,
            ln_eps: default_ln_eps(),
            final_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.patch_size == 0 || self.channels == 0 {
            return bad("image_size, patch_size and channels must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.d_tok == 0 || self.heads == 0 || self.d_tok % self.heads != 0 {
            return bad(format!("d_tok {} must be a positive multiple of heads {}", self.d_tok, self.heads));
        }
        if self.mlp_ratio == 0 || self.d_v == 0 {
            return bad("mlp_ratio and d_v must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return bad(format!("ln_eps must be > 0, got {}", self.ln_eps));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_numel(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn mlp_hidden(&self) -> usize {
        self.d_tok * self.mlp_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.d_tok / self.heads
    }

    pub fn has_output_projection(&self) -> bool {
        self.d_v != self.d_tok
    }

    /// Sequence length seen by every layer for `p` prompt tokens.
    pub fn seq_len(&self, prompt_len: usize) -> usize {
        1 + prompt_len + self.num_patches()
    }

    /// Canonical tensor names and shapes, in storage order.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_tok;
        let h = self.mlp_hidden();
        let mut specs = vec![
            ("patch_embed.weight".to_string(), vec![d, self.patch_dim()]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls".to_string(), vec![d]),
            ("pos".to_string(), vec![1 + self.num_patches(), d]),
        ];
        for k in 0..self.layers {
            let p = |s: &str| format!("layer{k}.{s}");
            specs.extend([
                (p("ln1.weight"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.qkv.weight"), vec![3 * d, d]),
                (p("attn.qkv.bias"), vec![3 * d]),
                (p("attn.out.weight"), vec![d, d]),
                (p("attn.out.bias"), vec![d]),
                (p("ln2.weight"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("mlp.fc1.weight"), vec![h, d]),
                (p("mlp.fc1.bias"), vec![h]),
                (p("mlp.fc2.weight"), vec![d, h]),
                (p("mlp.fc2.bias"), vec![d]),
            ]);
        }
        if self.final_norm {
            specs.push(("ln_post.weight".to_string(), vec![d]));
            specs.push(("ln_post.bias".to_string(), vec![d]));
        }
        if self.has_output_projection() {
            specs.push(("proj.weight".to_string(), vec![self.d_v, d]));
        }
        specs
    }

    /// Closed-form backbone parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_tok;
        let h = self.mlp_hidden();
        let embed = d * self.patch_dim() + d + d + (1 + self.num_patches()) * d;
        let layer = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (h * d + h) + (d * h + d);
        let post = if self.final_norm { 2 * d } else { 0 };
        let proj = if self.has_output_projection() { self.d_v * d } else { 0 };
        embed + self.layers * layer + post + proj
    }
}

/// Backbone weights in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTParams {
    config: ViTConfig,
    tensors: Vec<Tensor>,
}

impl ViTParams {
    /// Seeded initialisation: weights, CLS and positions `N(0, 0.02²)`,
    /// biases zero, layer-norm gains one. The output projection is drawn with
    /// standard deviation `d_tok^-1/2` so that a normalised CLS row maps to an
    /// embedding with entries of order one.
    pub fn init(config: &ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "vit");
        let tensors = config
            .tensor_specs()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with("ln1.weight") || name.ends_with("ln2.weight") || name == "ln_post.weight" {
                    Tensor::new(shape.clone(), vec![1.0; shape.iter().product()]).expect("ones")
                } else if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else if name == "proj.weight" {
                    rng::normal_tensor(&mut r, &shape, (config.d_tok as f32).powf(-0.5))
                } else {
                    rng::normal_tensor(&mut r, &shape, INIT_STD)
                }
            })
            .collect();
        Ok(ViTParams {
            config: config.clone(),
            tensors,
        })
    }

    pub fn from_named(config: &ViTConfig, mut named: ctns::NamedTensors) -> Result<Self> {
        config.validate()?;
        let mut tensors = Vec::new();
        for (name, shape) in config.tensor_specs() {
            let t = ctns::take_named(&mut named, &name)
                .ok_or_else(|| Error::Invalid(format!("weight file lacks tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Invalid(format!(
                    "tensor `{name}`: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        if let Some((extra, _)) = named.first() {
            return Err(Error::Invalid(format!("unexpected tensor `{extra}` in weight file")));
        }
        Ok(ViTParams {
            config: config.clone(),
            tensors,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.config
            .tensor_specs()
            .into_iter()
            .map(|(n, _)| n)
            .zip(&self.tensors)
            .collect()
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.config
            .tensor_specs()
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.tensors.iter_mut())
            .collect()
    }

    pub fn to_named(&self) -> ctns::NamedTensors {
        self.named().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    pub fn checksum(&self) -> String {
        let named = self.named();
        crate::tensor::checksum(named.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        ctns::write_ctns(path, &self.to_named())
    }

    pub fn load(path: impl AsRef<Path>, config: &ViTConfig) -> Result<Self> {
        Self::from_named(config, ctns::read_ctns(path)?)
    }

    /// Places every backbone tensor on `tape` as a leaf.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> VitNodes {
        let ids = self.tensors.iter().map(|t| tape.leaf(t.cast(), trainable)).collect();
        VitNodes { ids }
    }

    /// Like [`ViTParams::bind`], but the node for each tensor comes from
    /// `node(name, tensor)`.
    pub fn bind_with(&self, mut node: impl FnMut(String, &Tensor) -> NodeId) -> VitNodes {
        let ids = self.named().into_iter().map(|(n, t)| node(n, t)).collect();
        VitNodes { ids }
    }

    /// Runs the backbone on one image without recording gradients of interest.
    pub fn embed(&self, image: &Tensor, prompts: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let nodes = self.bind(&mut tape, false);
        let p = prompts.map(|p| tape.constant(p.clone()));
        let x = forward(&mut tape, &nodes, &self.config, image, p)?;
        Ok(tape.value(x).clone())
    }
}

/// Tape node ids of a bound backbone, in canonical order.
#[derive(Debug, Clone)]
pub struct VitNodes {
    ids: Vec<NodeId>,
}

impl VitNodes {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    fn get(&self, i: usize) -> NodeId {
        self.ids[i]
    }

    fn layer(&self, k: usize, offset: usize) -> NodeId {
        self.ids[slot(k, offset)]
    }

    fn post_norm(&self, config: &ViTConfig) -> Option<(NodeId, NodeId)> {
        let at = slot(config.layers, 0);
        config.final_norm.then(|| (self.ids[at], self.ids[at + 1]))
    }

    fn proj(&self, config: &ViTConfig) -> Option<NodeId> {
        let at = slot(config.layers, 0) + if config.final_norm { 2 } else { 0 };
        config.has_output_projection().then(|| self.ids[at])
    }
}

/// Learnable prompt matrix of shape `p × d_tok`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTokens(Tensor);

impl PromptTokens {
    /// Seeded `N(0, 0.02²)` prompts; `None` when `len == 0`.
    pub fn init(len: usize, d_tok: usize, seed: u64) -> Option<Self> {
        (len > 0).then(|| PromptTokens(rng::normal_tensor(&mut rng::stream(seed, "prompt"), &[len, d_tok], INIT_STD)))
    }

    pub fn from_tensor(t: Tensor, d_tok: usize) -> Result<Self> {
        if t.rank() != 2 || t.shape()[1] != d_tok {
            return Err(Error::Invalid(format!("prompt tensor shape {:?} does not have width {d_tok}", t.shape())));
        }
        Ok(PromptTokens(t))
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.0
    }
}

/// Rearranges a `channels × size × size` image into `n × (channels·patch²)`
/// rows in raster patch order. Within a row, values run channel-major, then
/// row, then column of the patch.
pub fn extract_patches(config: &ViTConfig, image: &Tensor) -> Result<Tensor> {
    let s = config.image_size;
    let want = [config.channels, s, s];
    let flat_ok = image.rank() == 1 && image.numel() == config.image_numel();
    if image.shape() != want && !flat_ok {
        return Err(Error::Shape {
            op: "patchify",
            lhs: image.shape().to_vec(),
            rhs: want.to_vec(),
        });
    }
    let (ps, g, c) = (config.patch_size, config.grid(), config.channels);
    let px = image.data();
    let mut out = Vec::with_capacity(image.numel());
    for gy in 0..g {
        for gx in 0..g {
            for ch in 0..c {
                for dy in 0..ps {
                    let row = (ch * s + gy * ps + dy) * s + gx * ps;
                    out.extend_from_slice(&px[row..row + ps]);
                }
            }
        }
    }
    Tensor::new(vec![g * g, config.patch_dim()], out)
}

/// `E_0`: projected patches plus positional embeddings 1..=n.
pub fn patchify<T: Scalar>(tape: &mut Tape<T>, nodes: &VitNodes, config: &ViTConfig, image: &Tensor) -> Result<NodeId> {
    let patches = tape.constant(extract_patches(config, image)?.cast());
    let proj = tape.matmul_t(patches, nodes.get(PATCH_W))?;
    let proj = tape.add(proj, nodes.get(PATCH_B))?;
    let pos = tape.slice_rows(nodes.get(POS), 1, 1 + config.num_patches())?;
    tape.add(proj, pos)
}

/// `c_0`: CLS token plus positional embedding 0, as a `1 × d_tok` row.
pub fn cls_token<T: Scalar>(tape: &mut Tape<T>, nodes: &VitNodes, config: &ViTConfig) -> Result<NodeId> {
    let cls = tape.reshape(nodes.get(CLS), vec![1, config.d_tok])?;
    let pos0 = tape.slice_rows(nodes.get(POS), 0, 1)?;
    tape.add(cls, pos0)
}

/// `[c_0, P, E_0]` concatenated along the sequence; `[c_0, E_0]` without prompts.
pub fn insert_prompt<T: Scalar>(tape: &mut Tape<T>, cls: NodeId, prompts: Option<NodeId>, patches: NodeId) -> Result<NodeId> {
    match prompts {
        Some(p) => tape.concat_rows(&[cls, p, patches]),
        None => tape.concat_rows(&[cls, patches]),
    }
}

fn layer<T: Scalar>(tape: &mut Tape<T>, nodes: &VitNodes, config: &ViTConfig, k: usize, x: NodeId) -> Result<NodeId> {
    let d = config.d_tok;
    let dh = config.head_dim();
    let eps = config.ln_eps;
    let w = |o: usize| nodes.layer(k, o);

    let h = tape.layer_norm(x, w(LN1_G), w(LN1_B), eps)?;
    let qkv = tape.matmul_t(h, w(QKV_W))?;
    let qkv = tape.add(qkv, w(QKV_B))?;
    let qkv_t = tape.transpose(qkv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(config.heads);
    for i in 0..config.heads {
        let q_t = tape.slice_rows(qkv_t, i * dh, (i + 1) * dh)?;
        let k_t = tape.slice_rows(qkv_t, d + i * dh, d + (i + 1) * dh)?;
        let v_t = tape.slice_rows(qkv_t, 2 * d + i * dh, 2 * d + (i + 1) * dh)?;
        let q = tape.transpose(q_t)?;
        let scores = tape.matmul(q, k_t)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax(scores)?;
        heads.push(tape.matmul_t(v_t, attn)?);
    }
    let merged_t = tape.concat_rows(&heads)?;
    let merged = tape.transpose(merged_t)?;
    let o = tape.matmul_t(merged, w(OUT_W))?;
    let o = tape.add(o, w(OUT_B))?;
    let x = tape.add(x, o)?;

    let h = tape.layer_norm(x, w(LN2_G), w(LN2_B), eps)?;
    let f = tape.matmul_t(h, w(FC1_W))?;
    let f = tape.add(f, w(FC1_B))?;
    let f = tape.gelu(f)?;
    let f = tape.matmul_t(f, w(FC2_W))?;
    let f = tape.add(f, w(FC2_B))?;
    tape.add(x, f)
}

/// Runs the transformer layers over `tokens` (`(1+p+n) × d_tok`) and returns
/// the image embedding `x_v` of length `d_v`.
pub fn encode<T: Scalar>(tape: &mut Tape<T>, tokens: NodeId, nodes: &VitNodes, config: &ViTConfig) -> Result<NodeId> {
    let shape = tape.shape(tokens);
    if shape.len() != 2 || shape[1] != config.d_tok || shape[0] < 1 {
        return Err(Error::Shape {
            op: "encode",
            lhs: shape.to_vec(),
            rhs: vec![config.seq_len(0), config.d_tok],
        });
    }
    let mut x = tokens;
    for k in 0..config.layers {
        x = layer(tape, nodes, config, k, x).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("transformer layer {k}: {m}")),
            other => other,
        })?;
    }
    let mut cls = tape.slice_rows(x, 0, 1)?;
    if let Some((g, b)) = nodes.post_norm(config) {
        cls = tape.layer_norm(cls, g, b, config.ln_eps)?;
    }
    if let Some(p) = nodes.proj(config) {
        cls = tape.matmul_t(cls, p)?;
    }
    tape.reshape(cls, vec![config.d_v])
}

/// Image → `x_v`, with optional prompt node of shape `p × d_tok`.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    nodes: &VitNodes,
    config: &ViTConfig,
    image: &Tensor,
    prompts: Option<NodeId>,
) -> Result<NodeId> {
    let e0 = patchify(tape, nodes, config, image)?;
    let c0 = cls_token(tape, nodes, config)?;
    let tokens = insert_prompt(tape, c0, prompts, e0)?;
    encode(tape, tokens, nodes, config)
}

/// Backbone forward without any prompt handling.
pub fn plain_forward<T: Scalar>(tape: &mut Tape<T>, nodes: &VitNodes, config: &ViTConfig, image: &Tensor) -> Result<NodeId> {
    let e0 = patchify(tape, nodes, config, image)?;
    let c0 = cls_token(tape, nodes, config)?;
    let tokens = tape.concat_rows(&[c0, e0])?;
    encode(tape, tokens, nodes, config)
}
