//! Slide-level evaluation: soft vote over patch probabilities, class-averaged
//! accuracy, the JSON report and the per-patch probability dump.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ctns;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::head::argmax;
use crate::model::Model;
use crate::par::Exec;
use crate::tensor::Tensor;

pub const REPORT_VERSION: u32 = 1;
const PROB_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideResult {
    pub slide_id: String,
    pub label: usize,
    pub mean_probs: Vec<f64>,
    pub predicted: usize,
}

/// Mean of the patch distributions and its argmax (lowest index on ties).
pub fn soft_vote(patch_probs: &[Vec<f64>]) -> Result<(Vec<f64>, usize)> {
    let first = patch_probs.first().ok_or_else(|| Error::Invalid("soft vote over zero patches".into()))?;
    let c = first.len();
    let mut mean = vec![0.0; c];
    for (i, p) in patch_probs.iter().enumerate() {
        let sum: f64 = p.iter().sum();
        if p.len() != c || p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > PROB_TOL {
            return Err(Error::Invalid(format!("patch {i} is not a probability vector over {c} classes")));
        }
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    let n = patch_probs.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    let label = argmax(&mean);
    Ok((mean, label))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub per_class: Vec<f64>,
    /// Slides of each class.
    pub support: Vec<usize>,
    #[serde(rename = "macro")]
    pub macro_accuracy: f64,
}

/// Per-class slide accuracy and its unweighted mean.
pub fn class_avg_accuracy(results: &[SlideResult], categories: &[String]) -> Result<ClassAccuracy> {
    let c = categories.len();
    let mut correct = vec![0usize; c];
    let mut support = vec![0usize; c];
    for r in results {
        if r.label >= c {
            return Err(Error::Invalid(format!("slide `{}` has label {} outside {c} classes", r.slide_id, r.label)));
        }
        support[r.label] += 1;
        correct[r.label] += usize::from(r.predicted == r.label);
    }
    if let Some(k) = support.iter().position(|&n| n == 0) {
        return Err(Error::Invalid(format!("class `{}` has no slides in the results", categories[k])));
    }
    let per_class: Vec<f64> = correct.iter().zip(&support).map(|(&a, &n)| a as f64 / n as f64).collect();
    let macro_accuracy = per_class.iter().sum::<f64>() / c as f64;
    Ok(ClassAccuracy {
        per_class,
        support,
        macro_accuracy,
    })
}

/// Per-patch probabilities in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchProbs {
    pub slide: Vec<usize>,
    pub label: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
}

impl PatchProbs {
    /// CTNS tensors `probs` (`N × C`), `slide` and `label` (`N`, stored as
    /// floats, exact below 2²⁴).
    pub fn to_named(&self) -> Result<ctns::NamedTensors> {
        let n = self.probs.len();
        let c = self.probs.first().map_or(0, Vec::len);
        let flat = self.probs.iter().flatten().map(|&v| v as f32).collect();
        let idx = |v: &[usize]| Tensor::vector(v.iter().map(|&x| x as f32).collect());
        Ok(vec![
            ("probs".into(), Tensor::matrix(n, c, flat)?),
            ("slide".into(), idx(&self.slide)?),
            ("label".into(), idx(&self.label)?),
        ])
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        ctns::write_ctns(path, &self.to_named()?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub slides: Vec<SlideResult>,
    pub accuracy: ClassAccuracy,
    pub patch_probs: PatchProbs,
}

/// Scores every patch with `score` (independent calls, possibly in
/// parallel), then soft-votes per slide in patch order.
pub fn evaluate_with<F>(dataset: &Dataset, exec: Exec, score: F) -> Result<Evaluation>
where
    F: Fn(&Tensor) -> Result<Vec<f64>> + Sync + Send,
{
    let jobs: Vec<(usize, &Tensor)> = (0..dataset.num_slides())
        .flat_map(|i| dataset.slide(i).1.iter().map(move |p| (i, p)))
        .collect();
    let probs = exec.try_map(&jobs, |(_, p)| score(p))?;
    let mut slides = Vec::with_capacity(dataset.num_slides());
    let mut start = 0;
    for i in 0..dataset.num_slides() {
        let (entry, patches) = dataset.slide(i);
        let (mean_probs, predicted) = soft_vote(&probs[start..start + patches.len()])
            .map_err(|e| e.context(format!("slide `{}`", entry.slide_id)))?;
        start += patches.len();
        slides.push(SlideResult {
            slide_id: entry.slide_id.clone(),
            label: entry.label,
            mean_probs,
            predicted,
        });
    }
    let accuracy = class_avg_accuracy(&slides, &dataset.manifest().categories)?;
    let patch_probs = PatchProbs {
        slide: jobs.iter().map(|(i, _)| *i).collect(),
        label: jobs.iter().map(|(i, _)| dataset.slide(*i).0.label).collect(),
        probs,
    };
    Ok(Evaluation {
        slides,
        accuracy,
        patch_probs,
    })
}

/// Forward passes only; nothing in `model` is modified.
pub fn evaluate(model: &Model, dataset: &Dataset, exec: Exec) -> Result<Evaluation> {
    if model.num_classes() != dataset.num_classes() {
        return Err(Error::Invalid(format!(
            "model predicts {} classes but the dataset has {}",
            model.num_classes(),
            dataset.num_classes()
        )));
    }
    evaluate_with(dataset, exec, |p| Ok(model.predict(p)?.probs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub category: String,
    pub accuracy: f64,
    pub slides: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub report_version: u32,
    pub method: String,
    pub seed: u64,
    #[serde(rename = "macro")]
    pub macro_accuracy: f64,
    pub per_class: Vec<ClassReport>,
    pub per_slide: Vec<SlideResult>,
    pub config: serde_json::Value,
}

impl Report {
    pub fn new(method: &str, seed: u64, config: serde_json::Value, eval: &Evaluation, categories: &[String]) -> Self {
        Report {
            report_version: REPORT_VERSION,
            method: method.into(),
            seed,
            macro_accuracy: eval.accuracy.macro_accuracy,
            per_class: categories
                .iter()
                .enumerate()
                .map(|(c, name)| ClassReport {
                    category: name.clone(),
                    accuracy: eval.accuracy.per_class[c],
                    slides: eval.accuracy.support[c],
                })
                .collect(),
            per_slide: eval.slides.clone(),
            config,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn res(id: &str, label: usize, predicted: usize) -> SlideResult {
        SlideResult {
            slide_id: id.into(),
            label,
            mean_probs: vec![],
            predicted,
        }
    }

    fn cats(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("k{i}")).collect()
    }

    #[test]
    fn soft_vote_cases() {
        let (m, l) = soft_vote(&[vec![0.3, 0.7]]).unwrap();
        assert_eq!((m, l), (vec![0.3, 0.7], 1));
        let (m, l) = soft_vote(&[vec![0.6, 0.4], vec![0.2, 0.8]]).unwrap();
        assert!((m[0] - 0.4).abs() < 1e-15 && (m[1] - 0.6).abs() < 1e-15);
        assert_eq!(l, 1);
        assert_eq!(soft_vote(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap().1, 0);
        assert!(soft_vote(&[]).is_err());
        assert!(soft_vote(&[vec![0.5, 0.6]]).is_err());
    }

    #[test]
    fn soft_vote_is_order_free() {
        let ps = vec![vec![0.1, 0.2, 0.7], vec![0.5, 0.25, 0.25], vec![0.3, 0.3, 0.4]];
        let mut rev = ps.clone();
        rev.reverse();
        let (a, la) = soft_vote(&ps).unwrap();
        let (b, lb) = soft_vote(&rev).unwrap();
        assert_eq!(la, lb);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn macro_accuracy_cases() {
        let all = vec![res("a", 0, 0), res("b", 1, 1)];
        assert_eq!(class_avg_accuracy(&all, &cats(2)).unwrap().macro_accuracy, 1.0);
        let half = vec![res("a", 0, 0), res("b", 0, 0), res("c", 1, 0), res("d", 1, 0)];
        let acc = class_avg_accuracy(&half, &cats(2)).unwrap();
        assert_eq!(acc.macro_accuracy, 0.5);
        assert_eq!(acc.per_class, [1.0, 0.0]);
        let doubled: Vec<_> = half.iter().chain(&half).cloned().collect();
        assert_eq!(class_avg_accuracy(&doubled, &cats(2)).unwrap().macro_accuracy, 0.5);
        let err = class_avg_accuracy(&half, &cats(3)).unwrap_err().to_string();
        assert!(err.contains("`k2`"), "{err}");
    }

    #[test]
    fn macro_equals_plain_accuracy_for_balanced_classes() {
        let rs = vec![res("a", 0, 0), res("b", 0, 1), res("c", 1, 1), res("d", 1, 1), res("e", 2, 0), res("f", 2, 2)];
        let plain = rs.iter().filter(|r| r.label == r.predicted).count() as f64 / rs.len() as f64;
        assert!((class_avg_accuracy(&rs, &cats(3)).unwrap().macro_accuracy - plain).abs() < 1e-15);
    }
}
