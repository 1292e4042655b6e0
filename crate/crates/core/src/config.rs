//! The experiment configuration document. Every field has a default, unknown
//! fields are rejected, and [`ExperimentConfig::resolve`] fills in the
//! policy-dependent choices so the echoed config is self-describing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::DEFAULT_TAU;
use crate::vit::ViTConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Prompts and the projection onto text space.
    Cite,
    /// Prompts and a linear classification head.
    VptHead,
    /// Linear classification head only.
    Linear,
    /// Every backbone tensor plus the head.
    Finetune,
    /// Nothing; zero-shot evaluation.
    None,
}

impl FreezePolicy {
    pub const ALL: [FreezePolicy; 5] = [
        FreezePolicy::Cite,
        FreezePolicy::VptHead,
        FreezePolicy::Linear,
        FreezePolicy::Finetune,
        FreezePolicy::None,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            FreezePolicy::Cite => "cite",
            FreezePolicy::VptHead => "vpt_head",
            FreezePolicy::Linear => "linear",
            FreezePolicy::Finetune => "finetune",
            FreezePolicy::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy `{s}` (expected cite, vpt_head, linear, finetune or none)")))
    }

    pub fn uses_prompts(self) -> bool {
        matches!(self, FreezePolicy::Cite | FreezePolicy::VptHead)
    }

    pub fn default_head(self) -> HeadKind {
        match self {
            FreezePolicy::Cite | FreezePolicy::None => HeadKind::Text,
            _ => HeadKind::Linear,
        }
    }

    pub fn trains_backbone(self) -> bool {
        self == FreezePolicy::Finetune
    }

    pub fn trains_head(self) -> bool {
        self != FreezePolicy::None
    }
}

impl std::fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Cosine similarity against the text bank, optionally after a projection.
    Text,
    /// `C × d_v` linear classifier.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub seed: u64,
    /// CTNS weight file replacing the seeded initialisation.
    pub weights: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { seed: 0, weights: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    pub d_l: usize,
    pub seed: u64,
    /// Precomputed embedding file (with JSON sidecar) replacing the toy encoder.
    pub bank: Option<PathBuf>,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            d_l: 48,
            seed: 0,
            bank: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub tau: f64,
    /// When false the image embedding meets the text bank directly, which
    /// requires `d_v == d_l`.
    pub projection: bool,
    pub kind: Option<HeadKind>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            tau: DEFAULT_TAU,
            projection: true,
            kind: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub policy: FreezePolicy,
    pub prompt_length: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 500,
            batch_size: 12,
            lr: 0.01,
            momentum: 0.9,
            seed: 0,
            policy: FreezePolicy::Cite,
            prompt_length: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub train_manifest: String,
    pub validation_manifest: String,
    pub shots: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            train_manifest: "train.json".into(),
            validation_manifest: "validation.json".into(),
            shots: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub vit: ViTConfig,
    pub backbone: BackboneConfig,
    pub text: TextConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            vit: ViTConfig::desk(),
            backbone: BackboneConfig::default(),
            text: TextConfig::default(),
            head: HeadConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Materialises defaults that depend on the policy and validates.
    pub fn resolve(mut self) -> Result<Self> {
        let policy = self.train.policy;
        let p = *self.train.prompt_length.get_or_insert(usize::from(policy.uses_prompts()));
        if p > 0 && !policy.uses_prompts() {
            return Err(Error::Config(format!("policy `{policy}` does not train prompts, but prompt_length = {p}")));
        }
        let kind = *self.head.kind.get_or_insert(policy.default_head());
        if matches!(policy, FreezePolicy::Cite | FreezePolicy::None) && kind != HeadKind::Text {
            return Err(Error::Config(format!("policy `{policy}` requires the text head")));
        }
        if matches!(policy, FreezePolicy::VptHead | FreezePolicy::Linear) && kind != HeadKind::Linear {
            return Err(Error::Config(format!("policy `{policy}` requires the linear head")));
        }
        if policy == FreezePolicy::None {
            self.head.projection = false;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        let t = &self.train;
        if t.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", t.lr)));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", t.momentum)));
        }
        if !(self.head.tau > 0.0 && self.head.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.head.tau)));
        }
        if self.text.d_l == 0 {
            return Err(Error::Config("d_l must be positive".into()));
        }
        if self.head.kind == Some(HeadKind::Text) && !self.head.projection && self.vit.d_v != self.text.d_l {
            return Err(Error::Config(format!(
                "projection disabled but d_v = {} differs from d_l = {}",
                self.vit.d_v, self.text.d_l
            )));
        }
        if self.data.shots == Some(0) {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        Ok(())
    }

    pub fn prompt_length(&self) -> usize {
        self.train.prompt_length.unwrap_or(0)
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head.kind.unwrap_or_else(|| self.train.policy.default_head())
    }
}
