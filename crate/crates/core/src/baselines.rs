//! Comparison methods sharing the backbone and evaluation stack, and the
//! prompt × text ablation grid.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, FreezePolicy, HeadKind};
use crate::data::{split, synthesize, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_with, Evaluation};
use crate::head::{argmax, Prediction};
use crate::model::Model;
use crate::par::Exec;
use crate::tensor::Tensor;
use crate::trainer::{train, Checkpoint, LogEntry};
use crate::vit::ViTParams;

/// `base` re-targeted at `policy`. An explicit prompt length survives only
/// for prompt-tuning policies; the head follows `head` or the policy default.
pub fn config_for(base: &ExperimentConfig, policy: FreezePolicy, head: Option<HeadKind>) -> Result<ExperimentConfig> {
    let mut c = base.clone();
    c.train.policy = policy;
    c.train.prompt_length = match base.train.prompt_length {
        Some(p) if p > 0 && policy.uses_prompts() => Some(p),
        _ => None,
    };
    c.head.kind = head;
    c.resolve()
}

pub fn linear_probe(train_set: &Dataset, base: &ExperimentConfig, exec: Exec) -> Result<(Checkpoint, Vec<LogEntry>)> {
    train(train_set, &config_for(base, FreezePolicy::Linear, None)?, exec)
}

pub fn fine_tune(train_set: &Dataset, base: &ExperimentConfig, exec: Exec) -> Result<(Checkpoint, Vec<LogEntry>)> {
    train(train_set, &config_for(base, FreezePolicy::Finetune, None)?, exec)
}

pub fn vpt_head(train_set: &Dataset, base: &ExperimentConfig, exec: Exec) -> Result<(Checkpoint, Vec<LogEntry>)> {
    train(train_set, &config_for(base, FreezePolicy::VptHead, None)?, exec)
}

/// The untrained model zero-shot classification uses: text head without a
/// projection, no prompts.
pub fn zero_shot_model(base: &ExperimentConfig, categories: &[String]) -> Result<Model> {
    Model::build(&config_for(base, FreezePolicy::None, Some(HeadKind::Text))?, categories)
}

/// Nearest text embedding by cosine, without any training step.
pub fn zero_shot(base: &ExperimentConfig, eval_set: &Dataset, exec: Exec) -> Result<Evaluation> {
    let model = zero_shot_model(base, &eval_set.manifest().categories)?;
    evaluate(&model, eval_set, exec)
}

/// Mean feature of each class, accumulated in `f64`.
pub fn ncc_centers(train_features: &[(Tensor, usize)], classes: usize) -> Result<Vec<Tensor>> {
    let d = train_features
        .first()
        .map(|(x, _)| x.numel())
        .ok_or_else(|| Error::Invalid("no training features".into()))?;
    let mut sums = vec![vec![0.0f64; d]; classes];
    let mut counts = vec![0usize; classes];
    for (x, c) in train_features {
        if *c >= classes || x.numel() != d {
            return Err(Error::Invalid(format!("training feature with label {c} and {} values", x.numel())));
        }
        counts[*c] += 1;
        for (s, v) in sums[*c].iter_mut().zip(x.data()) {
            *s += *v as f64;
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Invalid(format!("class {c} has no training features")));
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| Tensor::vector(s.into_iter().map(|v| (v / n as f64) as f32).collect()))
        .collect()
}

fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("cosine similarity with a zero vector".into()));
    }
    Ok(dot / (na * nb))
}

/// Softmax over `cos(center_c, x) / tau`; its argmax is the nearest center.
pub fn ncc_predict(centers: &[Tensor], x: &Tensor, tau: f64) -> Result<Prediction> {
    let logits = centers
        .iter()
        .map(|c| Ok(cosine(c.data(), x.data())? / tau))
        .collect::<Result<Vec<f64>>>()?;
    Prediction::from_logits(&logits)
}

/// Nearest class center labels for each evaluation feature.
pub fn ncc_few_shot(train_features: &[(Tensor, usize)], eval_features: &[Tensor], classes: usize) -> Result<Vec<usize>> {
    let centers = ncc_centers(train_features, classes)?;
    eval_features
        .iter()
        .map(|x| {
            let sims = centers.iter().map(|c| cosine(c.data(), x.data())).collect::<Result<Vec<_>>>()?;
            Ok(argmax(&sims))
        })
        .collect()
}

/// NCC on frozen backbone features, scored through the shared soft-vote
/// pipeline (patch probabilities are a `tau`-scaled softmax of the cosines).
pub fn ncc_evaluate(vit: &ViTParams, train_set: &Dataset, eval_set: &Dataset, tau: f64, exec: Exec) -> Result<Evaluation> {
    let labelled: Vec<(&Tensor, usize)> = (0..train_set.num_classes())
        .flat_map(|c| train_set.class_patches(c).into_iter().map(move |p| (p, c)))
        .collect();
    let feats = exec.try_map(&labelled, |(p, c)| Ok::<_, Error>((vit.embed(p, None)?, *c)))?;
    let centers = ncc_centers(&feats, train_set.num_classes())?;
    evaluate_with(eval_set, exec, |p| Ok(ncc_predict(&centers, &vit.embed(p, None)?, tau)?.probs))
}

/// One cell of the prompt × text grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    /// No prompt, no text: whole backbone plus linear head.
    Finetune,
    /// Prompt, no text.
    VptHead,
    /// No prompt, text: whole backbone beneath the projection and text head.
    FinetuneText,
    /// Prompt and text.
    Cite,
}

impl Cell {
    pub const ALL: [Cell; 4] = [Cell::Finetune, Cell::VptHead, Cell::FinetuneText, Cell::Cite];

    pub fn name(self) -> &'static str {
        match self {
            Cell::Finetune => "finetune",
            Cell::VptHead => "vpt_head",
            Cell::FinetuneText => "finetune_text",
            Cell::Cite => "cite",
        }
    }

    pub fn prompt(self) -> bool {
        matches!(self, Cell::VptHead | Cell::Cite)
    }

    pub fn text(self) -> bool {
        matches!(self, Cell::FinetuneText | Cell::Cite)
    }

    pub fn policy(self) -> FreezePolicy {
        match self {
            Cell::Finetune | Cell::FinetuneText => FreezePolicy::Finetune,
            Cell::VptHead => FreezePolicy::VptHead,
            Cell::Cite => FreezePolicy::Cite,
        }
    }

    pub fn config(self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let head = if self.text() { HeadKind::Text } else { HeadKind::Linear };
        let mut b = base.clone();
        b.head.projection = true;
        config_for(&b, self.policy(), Some(head))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub policy: FreezePolicy,
    pub head: HeadKind,
    pub prompt: bool,
    pub text: bool,
    #[serde(rename = "macro")]
    pub macro_accuracy: f64,
    pub per_class: Vec<f64>,
    pub seed: u64,
}

/// Trains and evaluates one cell.
pub fn run_cell(cell: Cell, train_set: &Dataset, eval_set: &Dataset, base: &ExperimentConfig, exec: Exec) -> Result<CellResult> {
    let cfg = cell.config(base)?;
    let (ckpt, _) = train(train_set, &cfg, exec)?;
    let ev = evaluate(&ckpt.model, eval_set, exec)?;
    Ok(CellResult {
        policy: cfg.train.policy,
        head: cfg.head_kind(),
        prompt: cell.prompt(),
        text: cell.text(),
        macro_accuracy: ev.accuracy.macro_accuracy,
        per_class: ev.accuracy.per_class,
        seed: cfg.train.seed,
    })
}

/// The 2×2 grid with identical seeds and iteration budgets. A failing cell
/// aborts the grid with an error naming it.
pub fn ablation_grid(train_set: &Dataset, eval_set: &Dataset, base: &ExperimentConfig, exec: Exec) -> Result<BTreeMap<String, CellResult>> {
    let mut out = BTreeMap::new();
    for cell in Cell::ALL {
        let r = run_cell(cell, train_set, eval_set, base, exec).map_err(|e| e.context(format!("ablation cell `{}`", cell.name())))?;
        out.insert(cell.name().to_string(), r);
    }
    Ok(out)
}

/// Where each seed's few-shot task comes from.
#[derive(Debug, Clone)]
pub enum TaskSource {
    /// A fresh synthetic dataset per seed (the generator seed is replaced by
    /// the run seed), split slide-wise with `train_fraction`.
    Synthetic { spec: SynthSpec, train_fraction: f64 },
    /// The same train/validation pair for every seed; only initialisation
    /// and sampling change.
    Fixed { train: Dataset, validation: Dataset },
}

impl TaskSource {
    pub fn task(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            TaskSource::Synthetic { spec, train_fraction } => {
                let spec = SynthSpec { seed, ..spec.clone() };
                let ds = synthesize(&spec)?;
                let (tr, va) = split(ds.manifest(), *train_fraction, seed)?;
                Ok((ds.restrict(&tr)?, ds.restrict(&va)?))
            }
            TaskSource::Fixed { train, validation } => Ok((train.clone(), validation.clone())),
        }
    }
}

/// All four cells at one (shots, seed) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub shots: usize,
    pub seed: u64,
    pub cells: BTreeMap<String, CellResult>,
}

impl GridRun {
    /// Whether `cell` reaches the best macro accuracy of the run (ties count).
    pub fn is_best(&self, cell: Cell) -> bool {
        let best = self.cells.values().map(|r| r.macro_accuracy).fold(f64::NEG_INFINITY, f64::max);
        self.cells.get(cell.name()).is_some_and(|r| r.macro_accuracy >= best)
    }

    /// Whether `cell` beats every other cell outright.
    pub fn is_strictly_best(&self, cell: Cell) -> bool {
        let Some(own) = self.cells.get(cell.name()) else { return false };
        self.cells
            .iter()
            .filter(|(n, _)| n.as_str() != cell.name())
            .all(|(_, r)| own.macro_accuracy > r.macro_accuracy)
    }
}

/// Runs the grid for every (shots, seed) pair. With `Exec::Parallel` the
/// independent cells run concurrently and each trains sequentially; results
/// are identical either way.
pub fn ablation_sweep(source: &TaskSource, shots: &[usize], seeds: &[u64], base: &ExperimentConfig, exec: Exec) -> Result<Vec<GridRun>> {
    let tasks = seeds
        .iter()
        .map(|&seed| {
            let (train_set, eval_set) = source.task(seed).map_err(|e| e.context(format!("seed {seed}")))?;
            let few = shots
                .iter()
                .map(|&k| train_set.few_shot(k).map_err(|e| e.context(format!("{k} shots, seed {seed}"))))
                .collect::<Result<Vec<_>>>()?;
            Ok((few, eval_set))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut jobs = Vec::new();
    for (si, &seed) in seeds.iter().enumerate() {
        for ki in 0..shots.len() {
            for cell in Cell::ALL {
                jobs.push((si, ki, seed, cell));
            }
        }
    }
    let inner = match exec {
        Exec::Parallel => Exec::Sequential,
        Exec::Sequential => Exec::default(),
    };
    let results = exec.try_map(&jobs, |&(si, ki, seed, cell)| {
        let mut cfg = base.clone();
        cfg.train.seed = seed;
        let (few, eval_set) = &tasks[si];
        run_cell(cell, &few[ki], eval_set, &cfg, inner)
            .map_err(|e| e.context(format!("ablation cell `{}` at {} shots, seed {seed}", cell.name(), shots[ki])))
    })?;

    let mut runs: Vec<GridRun> = Vec::new();
    for (&(_, ki, seed, cell), r) in jobs.iter().zip(results) {
        match runs.last_mut() {
            Some(run) if run.shots == shots[ki] && run.seed == seed && run.cells.len() < Cell::ALL.len() => {
                run.cells.insert(cell.name().to_string(), r);
            }
            _ => runs.push(GridRun {
                shots: shots[ki],
                seed,
                cells: BTreeMap::from([(cell.name().to_string(), r)]),
            }),
        }
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn ncc_exact_match_and_idempotence() {
        let a = t(&[1.0, 0.0, 0.5]);
        let b = t(&[-0.3, 1.0, 0.2]);
        let train = vec![(a.clone(), 0), (b.clone(), 1)];
        assert_eq!(ncc_few_shot(&train, &[b.clone(), a.clone()], 2).unwrap(), [1, 0]);
        let twice = vec![(a.clone(), 0), (a.clone(), 0), (b.clone(), 1), (b.clone(), 1)];
        assert_eq!(ncc_centers(&twice, 2).unwrap(), ncc_centers(&train, 2).unwrap());
        assert!(ncc_centers(&train, 3).is_err());
    }

    #[test]
    fn ncc_centers_match_streaming_mean() {
        let mut r = crate::rng::rng(8);
        let feats: Vec<(Tensor, usize)> = (0..60).map(|i| (crate::rng::normal_tensor(&mut r, &[16], 1.0), i % 3)).collect();
        let centers = ncc_centers(&feats, 3).unwrap();
        for c in 0..3 {
            let mut mean = vec![0.0f64; 16];
            let mut n = 0.0;
            for (x, _) in feats.iter().filter(|(_, l)| *l == c) {
                n += 1.0;
                for (m, v) in mean.iter_mut().zip(x.data()) {
                    *m += (*v as f64 - *m) / n;
                }
            }
            for (got, want) in centers[c].data().iter().zip(&mean) {
                assert!((*got as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cells_are_distinct_and_follow_the_grid() {
        let base = ExperimentConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for cell in Cell::ALL {
            let c = cell.config(&base).unwrap();
            assert_eq!(c.prompt_length() > 0, cell.prompt(), "{}", cell.name());
            assert_eq!(c.head_kind() == HeadKind::Text, cell.text());
            assert!(seen.insert((c.train.policy, c.head_kind())));
        }
        assert_eq!(Cell::Finetune.config(&base).unwrap().train.policy, FreezePolicy::Finetune);
    }

    #[test]
    fn zero_shot_requires_matching_widths() {
        let cats: Vec<String> = vec!["a".into(), "b".into()];
        assert!(zero_shot_model(&ExperimentConfig::default(), &cats).is_err());
        let mut c = ExperimentConfig::default();
        c.text.d_l = c.vit.d_v;
        let m = zero_shot_model(&c, &cats).unwrap();
        assert!(m.prompts().is_none());
        assert!(m.named().iter().all(|(n, _)| !n.starts_with("head.")));
    }
}
