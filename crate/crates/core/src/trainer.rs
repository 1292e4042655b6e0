//! Class-balanced SGD training under a freeze policy, with checkpoints that
//! allow exact resumption.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, FreezePolicy, HeadKind};
use crate::ctns;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par::Exec;
use crate::rng;
use crate::tensor::Tensor;
use crate::vit::ViTConfig;

pub const CHECKPOINT_TENSORS: &str = "checkpoint.ctns";
pub const CHECKPOINT_META: &str = "checkpoint.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
const VELOCITY_PREFIX: &str = "velocity/";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBudget {
    pub trainable: usize,
    /// Parameters of the vision encoder.
    pub total: usize,
    pub fraction: f64,
}

/// The shapes that decide the parameter budget.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    pub vit: ViTConfig,
    pub prompt_length: usize,
    pub d_l: usize,
    pub classes: usize,
    pub head: HeadKind,
    pub projection: bool,
}

impl ModelDims {
    pub fn of(cfg: &ExperimentConfig, classes: usize) -> Self {
        ModelDims {
            vit: cfg.vit.clone(),
            prompt_length: cfg.prompt_length(),
            d_l: cfg.text.d_l,
            classes,
            head: cfg.head_kind(),
            projection: cfg.head.projection,
        }
    }
}

/// Closed-form trainable-parameter count for `policy`.
pub fn count_trainable(policy: FreezePolicy, dims: &ModelDims) -> ParamBudget {
    let v = &dims.vit;
    let total = v.param_count();
    let prompts = dims.prompt_length * v.d_tok;
    let head = match dims.head {
        HeadKind::Text if dims.projection => dims.d_l * v.d_v + dims.d_l,
        HeadKind::Text => 0,
        HeadKind::Linear => dims.classes * v.d_v + dims.classes,
    };
    let trainable = match policy {
        FreezePolicy::Cite | FreezePolicy::VptHead => prompts + head,
        FreezePolicy::Linear => head,
        FreezePolicy::Finetune => total + head,
        FreezePolicy::None => 0,
    };
    ParamBudget {
        trainable,
        total,
        fraction: trainable as f64 / total as f64,
    }
}

/// Position of the class-balanced sampler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub next_class: usize,
    /// Draws already taken from the current pass over each class.
    pub cursors: Vec<usize>,
    /// Completed passes over each class.
    pub epochs: Vec<u64>,
}

/// Round-robin over classes; within a class, patches are visited in a
/// seeded order that is reshuffled on every pass.
pub struct ClassBalancedSampler<'a> {
    pools: Vec<Vec<&'a Tensor>>,
    seed: u64,
    state: SamplerState,
    orders: Vec<Vec<usize>>,
}

impl<'a> ClassBalancedSampler<'a> {
    pub fn new(dataset: &'a Dataset, seed: u64) -> Result<Self> {
        let c = dataset.num_classes();
        Self::with_state(
            dataset,
            seed,
            SamplerState {
                next_class: 0,
                cursors: vec![0; c],
                epochs: vec![0; c],
            },
        )
    }

    pub fn with_state(dataset: &'a Dataset, seed: u64, state: SamplerState) -> Result<Self> {
        let c = dataset.num_classes();
        let pools: Vec<Vec<&Tensor>> = (0..c).map(|k| dataset.class_patches(k)).collect();
        if let Some(empty) = pools.iter().position(Vec::is_empty) {
            return Err(Error::Invalid(format!(
                "class `{}` has no training patches",
                dataset.manifest().categories[empty]
            )));
        }
        if state.cursors.len() != c || state.epochs.len() != c || state.next_class >= c {
            return Err(Error::Invalid("sampler state does not match the number of classes".into()));
        }
        if let Some(k) = (0..c).find(|&k| state.cursors[k] >= pools[k].len()) {
            return Err(Error::Invalid(format!("sampler cursor for class {k} is past its patches")));
        }
        let orders = (0..c).map(|k| Self::order(seed, k, state.epochs[k], pools[k].len())).collect();
        Ok(ClassBalancedSampler {
            pools,
            seed,
            state,
            orders,
        })
    }

    fn order(seed: u64, class: usize, epoch: u64, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let tag = (class as u64) << 40 ^ epoch;
        idx.shuffle(&mut rng::rng(rng::derive(rng::derive(seed, rng::fnv1a64(b"sampler")), tag)));
        idx
    }

    pub fn state(&self) -> &SamplerState {
        &self.state
    }

    pub fn next_sample(&mut self) -> (&'a Tensor, usize) {
        let c = self.state.next_class;
        let i = self.orders[c][self.state.cursors[c]];
        self.state.cursors[c] += 1;
        if self.state.cursors[c] == self.pools[c].len() {
            self.state.cursors[c] = 0;
            self.state.epochs[c] += 1;
            self.orders[c] = Self::order(self.seed, c, self.state.epochs[c], self.pools[c].len());
        }
        self.state.next_class = (c + 1) % self.pools.len();
        (self.pools[c][i], c)
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Vec<(&'a Tensor, usize)> {
        (0..batch_size).map(|_| self.next_sample()).collect()
    }
}

/// One class-balanced batch of `(patch, label)` pairs.
pub fn class_balanced_batch<'a>(sampler: &mut ClassBalancedSampler<'a>, batch_size: usize) -> Vec<(&'a Tensor, usize)> {
    sampler.next_batch(batch_size)
}

pub type Velocity = BTreeMap<String, Tensor>;

/// `v ← momentum·v + g`, then `θ ← θ − lr·v`, for every gradient given. A
/// gradient for a tensor the policy freezes is refused before anything is
/// modified.
pub fn sgd_step(
    model: &mut Model,
    policy: FreezePolicy,
    grads: &[(String, Tensor)],
    lr: f64,
    momentum: f64,
    velocity: &mut Velocity,
) -> Result<()> {
    for (name, g) in grads {
        if !Model::is_trainable(policy, name) {
            return Err(Error::FreezeViolation(name.clone()));
        }
        match model.named().iter().find(|(n, _)| n == name) {
            None => return Err(Error::Invalid(format!("gradient for unknown tensor `{name}`"))),
            Some((_, t)) if t.shape() != g.shape() => {
                return Err(Error::Shape {
                    op: "sgd-step",
                    lhs: t.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                })
            }
            _ => {}
        }
    }
    let (lr, mu) = (lr as f32, momentum as f32);
    for (name, g) in grads {
        let v = velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = mu * *vi + gi;
        }
        let theta = model.tensor_mut(name).expect("checked above");
        for (ti, vi) in theta.data_mut().iter_mut().zip(v.data()) {
            *ti -= lr * vi;
        }
        if !theta.is_all_finite() {
            return Err(Error::NonFinite(format!("parameter `{name}` after update")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed optimisation steps.
    pub step: usize,
    pub sampler: SamplerState,
}

/// Everything needed to evaluate a trained model or continue its training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub categories: Vec<String>,
    pub model: Model,
    pub velocity: Velocity,
    pub state: TrainState,
    /// Backbone checksum before any training.
    pub backbone_init: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checksums {
    backbone: String,
    backbone_init: String,
    text_bank: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    checkpoint_version: u32,
    policy: FreezePolicy,
    seed: u64,
    config: ExperimentConfig,
    categories: Vec<String>,
    state: TrainState,
    trainable: ParamBudget,
    checksums: Checksums,
}

impl Checkpoint {
    pub fn policy(&self) -> FreezePolicy {
        self.config.train.policy
    }

    pub fn budget(&self) -> ParamBudget {
        count_trainable(self.policy(), &ModelDims::of(&self.config, self.categories.len()))
    }

    /// Trainable tensors followed by their velocities.
    pub fn named_tensors(&self) -> ctns::NamedTensors {
        let policy = self.policy();
        let mut out: ctns::NamedTensors = self
            .model
            .named()
            .into_iter()
            .filter(|(n, _)| Model::is_trainable(policy, n))
            .map(|(n, t)| (n, t.clone()))
            .collect();
        out.extend(self.velocity.iter().map(|(n, v)| (format!("{VELOCITY_PREFIX}{n}"), v.clone())));
        out
    }

    fn meta(&self) -> Meta {
        Meta {
            checkpoint_version: 1,
            policy: self.policy(),
            seed: self.config.train.seed,
            config: self.config.clone(),
            categories: self.categories.clone(),
            state: self.state.clone(),
            trainable: self.budget(),
            checksums: Checksums {
                backbone: self.model.backbone_checksum(),
                backbone_init: self.backbone_init.clone(),
                text_bank: self.model.bank().map(|b| b.checksum()),
            },
        }
    }

    pub fn meta_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.meta())?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        ctns::write_ctns(dir.join(CHECKPOINT_TENSORS), &self.named_tensors())?;
        let meta = dir.join(CHECKPOINT_META);
        fs::write(&meta, self.meta_json()?).map_err(|e| Error::io(&meta, e))
    }

    /// Rebuilds the model from the echoed config, then overlays the stored
    /// tensors and verifies the recorded checksums.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(CHECKPOINT_META);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Meta = serde_json::from_str(&text)?;
        if meta.checkpoint_version != 1 {
            return Err(Error::Invalid(format!("unsupported checkpoint version {}", meta.checkpoint_version)));
        }
        let config = meta.config.resolve()?;
        let mut model = Model::build(&config, &meta.categories)?;
        let mut velocity = Velocity::new();
        let mut params = Vec::new();
        for (name, t) in ctns::read_ctns(dir.join(CHECKPOINT_TENSORS))? {
            match name.strip_prefix(VELOCITY_PREFIX) {
                Some(n) => {
                    velocity.insert(n.to_string(), t);
                }
                None => params.push((name, t)),
            }
        }
        let policy = config.train.policy;
        if let Some((n, _)) = params.iter().find(|(n, _)| !Model::is_trainable(policy, n)) {
            return Err(Error::Invalid(format!("checkpoint stores `{n}`, which policy `{policy}` freezes")));
        }
        model.load_tensors(params)?;
        if model.backbone_checksum() != meta.checksums.backbone {
            return Err(Error::Invalid("backbone checksum differs from the one recorded in the checkpoint".into()));
        }
        if model.bank().map(|b| b.checksum()) != meta.checksums.text_bank {
            return Err(Error::Invalid("text bank checksum differs from the one recorded in the checkpoint".into()));
        }
        Ok(Checkpoint {
            config,
            categories: meta.categories,
            model,
            velocity,
            state: meta.state,
            backbone_init: meta.checksums.backbone_init,
        })
    }
}

pub fn write_log(path: impl AsRef<Path>, log: &[LogEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for e in log {
        serde_json::to_writer(&mut buf, e)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub struct Trainer<'a> {
    config: ExperimentConfig,
    categories: Vec<String>,
    model: Model,
    velocity: Velocity,
    sampler: ClassBalancedSampler<'a>,
    step: usize,
    backbone_init: String,
    log: Vec<LogEntry>,
    exec: Exec,
}

impl<'a> Trainer<'a> {
    /// Starts from the untrained model described by `config`.
    pub fn new(dataset: &'a Dataset, config: &ExperimentConfig, exec: Exec) -> Result<Self> {
        let config = config.clone().resolve()?;
        let categories = dataset.manifest().categories.clone();
        let model = Model::build(&config, &categories)?;
        Self::start(dataset, config, model, exec)
    }

    /// Starts from a caller-supplied model.
    pub fn with_model(dataset: &'a Dataset, config: &ExperimentConfig, model: Model, exec: Exec) -> Result<Self> {
        Self::start(dataset, config.clone().resolve()?, model, exec)
    }

    fn start(dataset: &'a Dataset, config: ExperimentConfig, model: Model, exec: Exec) -> Result<Self> {
        let policy = config.train.policy;
        if policy == FreezePolicy::None {
            return Err(Error::Config("zero-shot requires no training; use eval".into()));
        }
        model.check_policy(policy)?;
        let c = dataset.num_classes();
        if model.num_classes() != c {
            return Err(Error::Invalid(format!("model has {} classes, dataset {c}", model.num_classes())));
        }
        if config.train.batch_size < c {
            return Err(Error::Config(format!(
                "batch_size {} is smaller than the {c} classes a balanced batch needs",
                config.train.batch_size
            )));
        }
        let sampler = ClassBalancedSampler::new(dataset, config.train.seed)?;
        let backbone_init = model.backbone_checksum();
        Ok(Trainer {
            categories: dataset.manifest().categories.clone(),
            config,
            model,
            velocity: Velocity::new(),
            sampler,
            step: 0,
            backbone_init,
            log: Vec::new(),
            exec,
        })
    }

    /// Continues from a saved checkpoint on the same training data.
    pub fn resume(dataset: &'a Dataset, ckpt: Checkpoint, exec: Exec) -> Result<Self> {
        if dataset.manifest().categories != ckpt.categories {
            return Err(Error::Invalid("checkpoint categories differ from the dataset's".into()));
        }
        let sampler = ClassBalancedSampler::with_state(dataset, ckpt.config.train.seed, ckpt.state.sampler)?;
        Ok(Trainer {
            config: ckpt.config,
            categories: ckpt.categories,
            model: ckpt.model,
            velocity: ckpt.velocity,
            sampler,
            step: ckpt.state.step,
            backbone_init: ckpt.backbone_init,
            log: Vec::new(),
            exec,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    /// One optimisation step: sample, per-sample forward and backward
    /// (possibly in parallel), average gradients in batch order, update.
    pub fn step(&mut self) -> Result<LogEntry> {
        let step = self.step + 1;
        let policy = self.config.train.policy;
        let batch = self.sampler.next_batch(self.config.train.batch_size);
        let model = &self.model;
        let results = self
            .exec
            .try_map(&batch, |(img, label)| model.loss_and_grads(policy, img, *label))
            .map_err(|e| e.context(format!("step {step}")))?;
        let n = results.len() as f32;
        let mut loss = 0.0f64;
        let mut sum: Vec<(String, Tensor)> = Vec::new();
        for (l, grads) in results {
            loss += l;
            if sum.is_empty() {
                sum = grads;
            } else {
                for ((_, acc), (_, g)) in sum.iter_mut().zip(&grads) {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
        }
        for (_, g) in &mut sum {
            for v in g.data_mut() {
                *v /= n;
            }
        }
        let loss = loss / n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        let t = &self.config.train;
        sgd_step(&mut self.model, policy, &sum, t.lr, t.momentum, &mut self.velocity)
            .map_err(|e| e.context(format!("step {step}")))?;
        self.step = step;
        let entry = LogEntry { step, loss, lr: t.lr };
        debug!("step {step} loss {loss:.6}");
        self.log.push(entry);
        Ok(entry)
    }

    /// Runs until `config.train.iterations` steps have completed in total.
    pub fn run(&mut self) -> Result<()> {
        let total = self.config.train.iterations;
        while self.step < total {
            let e = self.step()?;
            if e.step % 100 == 0 || e.step == total {
                info!("{} step {}/{total} loss {:.4}", self.config.train.policy, e.step, e.loss);
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            categories: self.categories.clone(),
            model: self.model.clone(),
            velocity: self.velocity.clone(),
            state: TrainState {
                step: self.step,
                sampler: self.sampler.state().clone(),
            },
            backbone_init: self.backbone_init.clone(),
        }
    }

    pub fn finish(self) -> (Checkpoint, Vec<LogEntry>) {
        let ckpt = self.checkpoint();
        (ckpt, self.log)
    }
}

/// Trains `config.train.iterations` steps from scratch.
pub fn train(dataset: &Dataset, config: &ExperimentConfig, exec: Exec) -> Result<(Checkpoint, Vec<LogEntry>)> {
    let mut t = Trainer::new(dataset, config, exec)?;
    t.run()?;
    Ok(t.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, ImageSpec, SynthSpec};

    fn tiny_data(classes: usize, seed: u64) -> Dataset {
        let mut s = SynthSpec::new(classes, 2, seed);
        s.patches_min = 2;
        s.patches_max = 4;
        s.image = ImageSpec { channels: 1, size: 8 };
        synthesize(&s).unwrap()
    }

    fn tiny_cfg(policy: FreezePolicy) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.vit = ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            d_tok: 8,
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
            d_v: 6,
            ln_eps: 1e-5,
            final_norm: true,
        };
        c.text.d_l = 5;
        c.train.policy = policy;
        c.train.batch_size = 6;
        c.train.iterations = 4;
        c.resolve().unwrap()
    }

    #[test]
    fn round_robin_labels() {
        let ds = tiny_data(3, 0);
        let mut s = ClassBalancedSampler::new(&ds, 0).unwrap();
        let labels: Vec<usize> = class_balanced_batch(&mut s, 6).into_iter().map(|(_, l)| l).collect();
        assert_eq!(labels, [0, 1, 2, 0, 1, 2]);
        let mut counts = [0; 3];
        for (_, l) in s.next_batch(128) {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 42 || c == 43), "{counts:?}");
    }

    #[test]
    fn every_class_drawn_equally_and_each_pass_covers_the_class() {
        let ds = tiny_data(3, 1);
        let mut s = ClassBalancedSampler::new(&ds, 9).unwrap();
        let n = 50;
        let draws = s.next_batch(3 * n);
        let mut counts = [0; 3];
        for w in draws.chunks(3) {
            let mut seen: Vec<usize> = w.iter().map(|(_, l)| *l).collect();
            seen.sort();
            assert_eq!(seen, [0, 1, 2]);
        }
        for (_, l) in &draws {
            counts[*l] += 1;
        }
        assert_eq!(counts, [n; 3]);
        // the first pass over class 0 visits each of its patches once
        let pool = ds.class_patches(0);
        let first: Vec<*const Tensor> = draws.iter().filter(|(_, l)| *l == 0).take(pool.len()).map(|(t, _)| *t as *const _).collect();
        let mut want: Vec<*const Tensor> = pool.iter().map(|t| *t as *const _).collect();
        let mut got = first.clone();
        want.sort();
        got.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn sampler_resumes_from_state() {
        let ds = tiny_data(2, 2);
        let mut a = ClassBalancedSampler::new(&ds, 4).unwrap();
        a.next_batch(7);
        let mut b = ClassBalancedSampler::with_state(&ds, 4, a.state().clone()).unwrap();
        let xa: Vec<_> = a.next_batch(20).into_iter().map(|(t, l)| (t as *const Tensor, l)).collect();
        let xb: Vec<_> = b.next_batch(20).into_iter().map(|(t, l)| (t as *const Tensor, l)).collect();
        assert_eq!(xa, xb);
    }

    #[test]
    fn plain_sgd_and_momentum() {
        let ds = tiny_data(2, 0);
        let cfg = tiny_cfg(FreezePolicy::Linear);
        let mut m = Model::build(&cfg, &ds.manifest().categories).unwrap();
        let b = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        m.load_tensors([("cls_head.b".to_string(), b)]).unwrap();
        let g = vec![("cls_head.b".to_string(), Tensor::new(vec![2], vec![2.0, 2.0]).unwrap())];
        let mut v = Velocity::new();
        sgd_step(&mut m, FreezePolicy::Linear, &g, 0.1, 0.0, &mut v).unwrap();
        let got = m.tensors_by_name()["cls_head.b"].data()[0];
        assert!((got - 0.8).abs() < 1e-7);

        // momentum 0.9: v1 = 2, v2 = 0.9·2 + 2 = 3.8; θ = 0.8 − 0.1·2 − 0.1·3.8
        let mut v = Velocity::new();
        sgd_step(&mut m, FreezePolicy::Linear, &g, 0.1, 0.9, &mut v).unwrap();
        sgd_step(&mut m, FreezePolicy::Linear, &g, 0.1, 0.9, &mut v).unwrap();
        assert!((v["cls_head.b"].data()[0] - 3.8).abs() < 1e-6);
        assert!((m.tensors_by_name()["cls_head.b"].data()[0] - 0.22).abs() < 1e-6);
    }

    #[test]
    fn frozen_gradient_is_a_freeze_violation() {
        let ds = tiny_data(2, 0);
        let cfg = tiny_cfg(FreezePolicy::Cite);
        let mut m = Model::build(&cfg, &ds.manifest().categories).unwrap();
        let before = m.clone();
        let g = vec![
            ("prompts".to_string(), Tensor::zeros(&[1, 8])),
            ("cls".to_string(), Tensor::zeros(&[8])),
        ];
        let err = sgd_step(&mut m, FreezePolicy::Cite, &g, 0.1, 0.9, &mut Velocity::new()).unwrap_err();
        assert!(matches!(err, Error::FreezeViolation(_)), "{err}");
        assert_eq!(m, before);
    }

    #[test]
    fn budget_closed_forms() {
        let dims = |p, head, projection| ModelDims {
            vit: ViTConfig::desk(),
            prompt_length: p,
            d_l: 48,
            classes: 3,
            head,
            projection,
        };
        let total = ViTConfig::desk().param_count();
        assert_eq!(count_trainable(FreezePolicy::Cite, &dims(1, HeadKind::Text, true)).trainable, 64 + 48 * 32 + 48);
        assert_eq!(count_trainable(FreezePolicy::None, &dims(0, HeadKind::Text, true)).trainable, 0);
        assert_eq!(count_trainable(FreezePolicy::Linear, &dims(0, HeadKind::Linear, true)).trainable, 3 * 32 + 3);
        assert_eq!(count_trainable(FreezePolicy::VptHead, &dims(1, HeadKind::Linear, true)).trainable, 64 + 3 * 32 + 3);
        let ft = count_trainable(FreezePolicy::Finetune, &dims(0, HeadKind::Linear, true));
        assert_eq!((ft.trainable, ft.total), (total + 99, total));
    }

    #[test]
    fn training_is_deterministic_and_respects_freezing() {
        let ds = tiny_data(2, 3);
        for policy in [FreezePolicy::Cite, FreezePolicy::VptHead, FreezePolicy::Linear, FreezePolicy::Finetune] {
            let cfg = tiny_cfg(policy);
            let init = Model::build(&cfg, &ds.manifest().categories).unwrap();
            let (a, log) = train(&ds, &cfg, Exec::Parallel).unwrap();
            let (b, _) = train(&ds, &cfg, Exec::Sequential).unwrap();
            assert_eq!(a, b, "{policy}");
            assert_eq!(log.len(), 4);
            assert_eq!(log.iter().map(|e| e.step).collect::<Vec<_>>(), [1, 2, 3, 4]);
            for ((name, before), (_, after)) in init.named().into_iter().zip(a.model.named()) {
                if !Model::is_trainable(policy, &name) {
                    assert!(before.bit_eq(after), "{policy} {name}");
                }
            }
            let changed = init.backbone_checksum() != a.model.backbone_checksum();
            assert_eq!(changed, policy.trains_backbone(), "{policy}");
        }
        let mut zs = tiny_cfg(FreezePolicy::Cite);
        zs.train.policy = FreezePolicy::None;
        zs.train.prompt_length = None;
        zs.head.kind = None;
        zs.text.d_l = 6;
        let err = train(&ds, &zs, Exec::Sequential).unwrap_err().to_string();
        assert!(err.contains("use eval"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_and_exact_resumption() {
        let ds = tiny_data(2, 5);
        let mut cfg = tiny_cfg(FreezePolicy::Cite);
        cfg.train.iterations = 6;
        let (straight, _) = train(&ds, &cfg, Exec::Sequential).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(&ds, &cfg, Exec::Sequential).unwrap();
        for _ in 0..3 {
            t.step().unwrap();
        }
        t.checkpoint().save(dir.path()).unwrap();
        let loaded = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(loaded, t.checkpoint());
        let mut r = Trainer::resume(&ds, loaded, Exec::Sequential).unwrap();
        r.run().unwrap();
        assert_eq!(r.checkpoint(), straight);
    }

    #[test]
    fn zero_learning_rate_keeps_initialisation() {
        let ds = tiny_data(2, 6);
        let mut cfg = tiny_cfg(FreezePolicy::Finetune);
        cfg.train.lr = 0.0;
        let init = Model::build(&cfg, &ds.manifest().categories).unwrap();
        let (ck, _) = train(&ds, &cfg, Exec::Sequential).unwrap();
        assert_eq!(ck.model, init);
    }

    #[test]
    fn batch_must_cover_classes() {
        let ds = tiny_data(3, 0);
        let mut cfg = tiny_cfg(FreezePolicy::Cite);
        cfg.train.batch_size = 2;
        assert!(Trainer::new(&ds, &cfg, Exec::Sequential).is_err());
    }
}
