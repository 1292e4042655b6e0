//! Backbone, prompts and head bundled into one classifier, plus the mapping
//! from a freeze policy to the tensors it trains.

use std::collections::BTreeMap;

use crate::autodiff::{NodeId, Tape};
use crate::config::{ExperimentConfig, FreezePolicy, HeadKind};
use crate::error::{Error, Result};
use crate::head::{self, LinearHead, Prediction, Projection};
use crate::tensor::{Scalar, Tensor};
use crate::text_bank::TextBank;
use crate::vit::{self, PromptTokens, ViTParams, VitNodes};

pub const PROMPT_NAME: &str = "prompts";

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Text {
        projection: Option<Projection>,
        bank: TextBank,
        tau: f64,
    },
    Linear(LinearHead),
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Text { .. } => HeadKind::Text,
            Head::Linear(_) => HeadKind::Linear,
        }
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        match self {
            Head::Text { projection: Some(p), .. } => vec![
                (Projection::WEIGHT.into(), &p.weight),
                (Projection::BIAS.into(), &p.bias),
            ],
            Head::Text { projection: None, .. } => vec![],
            Head::Linear(l) => vec![(LinearHead::WEIGHT.into(), &l.weight), (LinearHead::BIAS.into(), &l.bias)],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    vit: ViTParams,
    prompts: Option<PromptTokens>,
    head: Head,
}

/// Tape ids of a model bound for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vit: VitNodes,
    prompts: Option<NodeId>,
    head: Vec<NodeId>,
    bank: Option<NodeId>,
    trainable: Vec<(String, NodeId)>,
}

impl Bound {
    /// Trainable leaves in canonical parameter order.
    pub fn trainable(&self) -> &[(String, NodeId)] {
        &self.trainable
    }

    pub fn prompts(&self) -> Option<NodeId> {
        self.prompts
    }

    pub fn head(&self) -> &[NodeId] {
        &self.head
    }

    pub fn vit(&self) -> &VitNodes {
        &self.vit
    }
}

impl Model {
    pub fn new(vit: ViTParams, prompts: Option<PromptTokens>, head: Head) -> Result<Self> {
        let cfg = vit.config();
        if let Some(p) = &prompts {
            if p.tensor().shape()[1] != cfg.d_tok {
                return Err(Error::Invalid(format!(
                    "prompt width {} does not match token width {}",
                    p.tensor().shape()[1],
                    cfg.d_tok
                )));
            }
        }
        match &head {
            Head::Text { projection, bank, tau } => {
                if !(*tau > 0.0) {
                    return Err(Error::Config(format!("tau must be positive, got {tau}")));
                }
                match projection {
                    Some(p) => {
                        let want = [bank.dim(), cfg.d_v];
                        if p.weight.shape() != want || p.bias.shape() != [bank.dim()] {
                            return Err(Error::Invalid(format!(
                                "projection `{}` has shape {:?}, expected {want:?}",
                                Projection::WEIGHT,
                                p.weight.shape()
                            )));
                        }
                    }
                    None if cfg.d_v != bank.dim() => {
                        return Err(Error::Config(format!(
                            "projection disabled but d_v = {} differs from d_l = {}",
                            cfg.d_v,
                            bank.dim()
                        )))
                    }
                    None => {}
                }
            }
            Head::Linear(l) => {
                if l.weight.rank() != 2 || l.weight.shape()[1] != cfg.d_v || l.bias.shape() != [l.weight.shape()[0]] {
                    return Err(Error::Invalid(format!(
                        "linear head `{}` has shape {:?}, expected C × {}",
                        LinearHead::WEIGHT,
                        l.weight.shape(),
                        cfg.d_v
                    )));
                }
            }
        }
        Ok(Model { vit, prompts, head })
    }

    /// Constructs the untrained model an experiment starts from. The backbone
    /// and text bank come from their own seeds (or files); prompts and head
    /// are initialised from the training seed.
    pub fn build(cfg: &ExperimentConfig, categories: &[String]) -> Result<Self> {
        let vit = match &cfg.backbone.weights {
            Some(path) => ViTParams::load(path, &cfg.vit)?,
            None => ViTParams::init(&cfg.vit, cfg.backbone.seed)?,
        };
        let seed = cfg.train.seed;
        let prompts = PromptTokens::init(cfg.prompt_length(), cfg.vit.d_tok, seed);
        let head = match cfg.head_kind() {
            HeadKind::Text => {
                let bank = build_bank(cfg, categories)?;
                let projection = cfg.head.projection.then(|| Projection::init(cfg.vit.d_v, bank.dim(), seed));
                Head::Text {
                    projection,
                    bank,
                    tau: cfg.head.tau,
                }
            }
            HeadKind::Linear => Head::Linear(LinearHead::init(cfg.vit.d_v, categories.len(), seed)),
        };
        Model::new(vit, prompts, head)
    }

    pub fn vit(&self) -> &ViTParams {
        &self.vit
    }

    pub fn prompts(&self) -> Option<&PromptTokens> {
        self.prompts.as_ref()
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn bank(&self) -> Option<&TextBank> {
        match &self.head {
            Head::Text { bank, .. } => Some(bank),
            Head::Linear(_) => None,
        }
    }

    pub fn num_classes(&self) -> usize {
        match &self.head {
            Head::Text { bank, .. } => bank.num_classes(),
            Head::Linear(l) => l.weight.shape()[0],
        }
    }

    pub fn prompt_length(&self) -> usize {
        self.prompts.as_ref().map_or(0, PromptTokens::len)
    }

    /// Every parameter tensor (backbone, prompts, head) in canonical order.
    /// The text bank is not a parameter and never appears here.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.vit.named();
        if let Some(p) = &self.prompts {
            out.push((PROMPT_NAME.into(), p.tensor()));
        }
        out.extend(self.head.named());
        out
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            PROMPT_NAME => self.prompts.as_mut().map(PromptTokens::tensor_mut),
            Projection::WEIGHT | Projection::BIAS => match &mut self.head {
                Head::Text { projection: Some(p), .. } => {
                    Some(if name == Projection::WEIGHT { &mut p.weight } else { &mut p.bias })
                }
                _ => None,
            },
            LinearHead::WEIGHT | LinearHead::BIAS => match &mut self.head {
                Head::Linear(l) => Some(if name == LinearHead::WEIGHT { &mut l.weight } else { &mut l.bias }),
                _ => None,
            },
            _ => self.vit.named_mut().into_iter().find(|(n, _)| n == name).map(|(_, t)| t),
        }
    }

    /// Whether `policy` trains the tensor called `name`.
    pub fn is_trainable(policy: FreezePolicy, name: &str) -> bool {
        let is_prompt = name == PROMPT_NAME;
        let is_projection = name == Projection::WEIGHT || name == Projection::BIAS;
        let is_linear = name == LinearHead::WEIGHT || name == LinearHead::BIAS;
        match policy {
            FreezePolicy::Cite => is_prompt || is_projection,
            FreezePolicy::VptHead => is_prompt || is_linear,
            FreezePolicy::Linear => is_linear,
            FreezePolicy::Finetune => !is_prompt,
            FreezePolicy::None => false,
        }
    }

    pub fn trainable_names(&self, policy: FreezePolicy) -> Vec<String> {
        self.named()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| Self::is_trainable(policy, n))
            .collect()
    }

    /// Per-tensor tally of trainable entries.
    pub fn trainable_count(&self, policy: FreezePolicy) -> usize {
        self.named()
            .into_iter()
            .filter(|(n, _)| Self::is_trainable(policy, n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Checks that the model carries everything `policy` trains, so the
    /// trainable set is exactly the policy's list.
    pub fn check_policy(&self, policy: FreezePolicy) -> Result<()> {
        let wants = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("policy `{policy}` requires {what}")))
            }
        };
        match policy {
            FreezePolicy::Cite => {
                wants(self.prompts.is_some(), "prompt tokens")?;
                wants(matches!(self.head, Head::Text { projection: Some(_), .. }), "a text head with projection")
            }
            FreezePolicy::VptHead => {
                wants(self.prompts.is_some(), "prompt tokens")?;
                wants(self.head.kind() == HeadKind::Linear, "a linear head")
            }
            FreezePolicy::Linear => {
                wants(self.prompts.is_none(), "no prompt tokens")?;
                wants(self.head.kind() == HeadKind::Linear, "a linear head")
            }
            FreezePolicy::Finetune => wants(self.prompts.is_none(), "no prompt tokens"),
            FreezePolicy::None => Ok(()),
        }
    }

    pub fn backbone_checksum(&self) -> String {
        self.vit.checksum()
    }

    /// Places the model on `tape`; leaves are trainable exactly when `policy`
    /// trains them. The text bank is always a constant.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, policy: FreezePolicy) -> Bound {
        self.bind_with(tape, policy, &BTreeMap::new())
    }

    /// [`Model::bind`] where trainable tensors named in `supplied` use the
    /// given nodes instead of fresh leaves. Gradient checks use this to feed
    /// perturbed higher-precision copies through the same graph.
    pub fn bind_with<T: Scalar>(&self, tape: &mut Tape<T>, policy: FreezePolicy, supplied: &BTreeMap<String, NodeId>) -> Bound {
        let mut trainable = Vec::new();
        let mut place = |tape: &mut Tape<T>, name: String, t: &Tensor| {
            let train = Self::is_trainable(policy, &name);
            let id = match supplied.get(&name) {
                Some(&id) if train => id,
                _ => tape.leaf(t.cast(), train),
            };
            if train {
                trainable.push((name, id));
            }
            id
        };
        let vit = self.vit.bind_with(|name, t| place(tape, name, t));
        let prompts = self.prompts.as_ref().map(|p| place(tape, PROMPT_NAME.to_string(), p.tensor()));
        let head = self.head.named().into_iter().map(|(name, t)| place(tape, name, t)).collect();
        let bank = self.bank().map(|b| tape.constant(b.embeddings().cast()));
        Bound {
            vit,
            prompts,
            head,
            bank,
            trainable,
        }
    }

    /// Image embedding `x_v` on the tape.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, image: &Tensor) -> Result<NodeId> {
        vit::forward(tape, &bound.vit, self.vit.config(), image, bound.prompts)
    }

    pub fn logits<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, image: &Tensor) -> Result<NodeId> {
        let x_v = self.encode(tape, bound, image)?;
        match &self.head {
            Head::Text { bank, tau, .. } => {
                let proj = match bound.head.as_slice() {
                    [w, b] => Some((*w, *b)),
                    _ => None,
                };
                let x = head::project(tape, x_v, proj, bank.dim())?;
                head::cosine_logits(tape, x, bound.bank.expect("text head binds its bank"), *tau)
            }
            Head::Linear(_) => head::linear_logits(tape, x_v, bound.head[0], bound.head[1]),
        }
    }

    /// Loss and gradients of one labelled image with respect to every tensor
    /// `policy` trains, in [`Bound::trainable`] order.
    pub fn loss_and_grads(&self, policy: FreezePolicy, image: &Tensor, label: usize) -> Result<(f64, Vec<(String, Tensor)>)> {
        let mut tape = Tape::<f32>::new();
        let bound = self.bind(&mut tape, policy);
        let logits = self.logits(&mut tape, &bound, image)?;
        let loss = head::loss(&mut tape, logits, label)?;
        let ids: Vec<NodeId> = bound.trainable.iter().map(|(_, id)| *id).collect();
        let mut grads = tape.backward(loss, &ids)?;
        let out = bound
            .trainable
            .into_iter()
            .map(|(name, id)| (name, grads.remove(&id).expect("backward returns every wanted leaf")))
            .collect();
        Ok((tape.value(loss).data()[0] as f64, out))
    }

    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::<f32>::new();
        let bound = self.bind(&mut tape, FreezePolicy::None);
        let logits = self.logits(&mut tape, &bound, image)?;
        Prediction::from_logits(tape.value(logits).data())
    }

    /// `x_v` with the model's own prompts.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        self.vit.embed(image, self.prompts.as_ref().map(PromptTokens::tensor))
    }

    /// Overwrites parameters by name; every name must exist with a matching shape.
    pub fn load_tensors(&mut self, tensors: impl IntoIterator<Item = (String, Tensor)>) -> Result<()> {
        for (name, t) in tensors {
            let slot = self
                .tensor_mut(&name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint tensor `{name}` has no place in this model")))?;
            if slot.shape() != t.shape() {
                return Err(Error::Invalid(format!(
                    "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }

    pub fn tensors_by_name(&self) -> BTreeMap<String, Tensor> {
        self.named().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }
}

/// The text bank an experiment uses: loaded from file when configured,
/// otherwise the toy encoder over the category names.
pub fn build_bank(cfg: &ExperimentConfig, categories: &[String]) -> Result<TextBank> {
    let bank = match &cfg.text.bank {
        Some(path) => TextBank::load(path)?,
        None => TextBank::toy_encode(categories, cfg.text.d_l, cfg.text.seed)?,
    };
    if bank.categories() != categories {
        return Err(Error::Invalid(format!(
            "text bank categories {:?} differ from dataset categories {categories:?}",
            bank.categories()
        )));
    }
    if bank.dim() != cfg.text.d_l {
        return Err(Error::Config(format!(
            "text bank has width {} but config says d_l = {}",
            bank.dim(),
            cfg.text.d_l
        )));
    }
    Ok(bank)
}
