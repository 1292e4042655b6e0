//! Slides, patches and labels: manifests, loading, synthetic generation,
//! few-shot selection and the slide-level train/validation split.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::ctns;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Name of the stacked `N × (channels·size·size)` tensor in a patch file.
pub const PATCH_TENSOR: &str = "patches";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSpec {
    pub channels: usize,
    pub size: usize,
}

impl Default for ImageSpec {
    fn default() -> Self {
        ImageSpec { channels: 3, size: 32 }
    }
}

impl ImageSpec {
    pub fn numel(&self) -> usize {
        self.channels * self.size * self.size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideEntry {
    pub slide_id: String,
    pub label: usize,
    /// Paths relative to the dataset root. Each file holds either one patch
    /// or a stacked `patches` tensor.
    pub patch_paths: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideManifest {
    pub categories: Vec<String>,
    /// Absent for a full, not yet split, dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub image: ImageSpec,
    pub slides: Vec<SlideEntry>,
}

impl SlideManifest {
    pub fn validate(&self) -> Result<()> {
        let c = self.categories.len();
        if c < 2 {
            return Err(Error::Invalid(format!("manifest needs at least 2 categories, got {c}")));
        }
        if self.image.numel() == 0 {
            return Err(Error::Invalid("image spec has a zero dimension".into()));
        }
        let mut seen = BTreeSet::new();
        for s in &self.slides {
            if !seen.insert(s.slide_id.as_str()) {
                return Err(Error::Invalid(format!("duplicate slide id `{}`", s.slide_id)));
            }
            if s.label >= c {
                return Err(Error::Invalid(format!(
                    "slide `{}` has label {} but only {c} categories exist",
                    s.slide_id, s.label
                )));
            }
            if s.patch_paths.is_empty() {
                return Err(Error::Invalid(format!("slide `{}` lists no patches", s.slide_id)));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn slides_per_class(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.slides {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: SlideManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    fn with_slides(&self, split: Option<Split>, keep: impl Fn(&SlideEntry) -> bool) -> SlideManifest {
        SlideManifest {
            categories: self.categories.clone(),
            split,
            image: self.image,
            slides: self.slides.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }
}

/// A manifest together with its decoded patches; `patches[i][j]` is patch
/// `j` of slide `i`, a flat `channels·size·size` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    manifest: SlideManifest,
    patches: Vec<Vec<Tensor>>,
}

impl Dataset {
    pub fn new(manifest: SlideManifest, patches: Vec<Vec<Tensor>>) -> Result<Self> {
        manifest.validate()?;
        if patches.len() != manifest.slides.len() {
            return Err(Error::Invalid(format!(
                "{} slides in manifest but {} patch lists",
                manifest.slides.len(),
                patches.len()
            )));
        }
        let d = manifest.image.numel();
        for (s, ps) in manifest.slides.iter().zip(&patches) {
            if ps.is_empty() {
                return Err(Error::Invalid(format!("slide `{}` has no patches", s.slide_id)));
            }
            if let Some(bad) = ps.iter().find(|p| p.numel() != d) {
                return Err(Error::Invalid(format!(
                    "slide `{}`: patch of shape {:?} does not match image spec ({d} values)",
                    s.slide_id,
                    bad.shape()
                )));
            }
        }
        Ok(Dataset { manifest, patches })
    }

    /// Reads every patch file listed in `manifest`, relative to `root`.
    pub fn load(root: impl AsRef<Path>, manifest: SlideManifest) -> Result<Self> {
        let root = root.as_ref();
        manifest.validate()?;
        let d = manifest.image.numel();
        let mut patches = Vec::with_capacity(manifest.slides.len());
        for s in &manifest.slides {
            let mut ps = Vec::new();
            for rel in &s.patch_paths {
                let path = root.join(rel);
                for (name, t) in ctns::read_ctns(&path)? {
                    if t.rank() == 2 && t.last_dim() == d {
                        ps.extend((0..t.rows()).map(|r| Tensor::from_parts(vec![d], t.row(r).to_vec())));
                    } else if t.numel() == d {
                        ps.push(t.reshape(vec![d])?);
                    } else {
                        return Err(Error::Invalid(format!(
                            "{}: tensor `{name}` of shape {:?} is neither one patch nor a stack of {d}-value patches",
                            path.display(),
                            t.shape()
                        )));
                    }
                }
            }
            patches.push(ps);
        }
        Self::new(manifest, patches)
    }

    /// Loads `<root>/<manifest_name>`.
    pub fn open(root: impl AsRef<Path>, manifest_name: &str) -> Result<Self> {
        let root = root.as_ref();
        Self::load(root, SlideManifest::load(root.join(manifest_name))?)
    }

    /// Writes one stacked patch file per slide at its single listed path.
    pub fn write_patches(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        for (s, ps) in self.manifest.slides.iter().zip(&self.patches) {
            let [rel] = s.patch_paths.as_slice() else {
                return Err(Error::Invalid(format!(
                    "slide `{}`: writing requires exactly one stacked patch path",
                    s.slide_id
                )));
            };
            let path = root.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let d = self.manifest.image.numel();
            let data: Vec<f32> = ps.iter().flat_map(|p| p.data().iter().copied()).collect();
            ctns::write_ctns(&path, &[(PATCH_TENSOR.to_string(), Tensor::matrix(ps.len(), d, data)?)])?;
        }
        Ok(())
    }

    pub fn manifest(&self) -> &SlideManifest {
        &self.manifest
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }

    pub fn num_slides(&self) -> usize {
        self.patches.len()
    }

    pub fn slide(&self, i: usize) -> (&SlideEntry, &[Tensor]) {
        (&self.manifest.slides[i], &self.patches[i])
    }

    pub fn total_patches(&self) -> usize {
        self.patches.iter().map(Vec::len).sum()
    }

    pub fn patch_counts(&self) -> BTreeMap<String, usize> {
        self.manifest
            .slides
            .iter()
            .zip(&self.patches)
            .map(|(s, p)| (s.slide_id.clone(), p.len()))
            .collect()
    }

    /// All patches of class `c`, in slide order then patch order.
    pub fn class_patches(&self, c: usize) -> Vec<&Tensor> {
        self.manifest
            .slides
            .iter()
            .zip(&self.patches)
            .filter(|(s, _)| s.label == c)
            .flat_map(|(_, p)| p.iter())
            .collect()
    }

    /// The slides named in `manifest`, which must all belong to `self`.
    pub fn restrict(&self, manifest: &SlideManifest) -> Result<Dataset> {
        let index: BTreeMap<&str, usize> = self
            .manifest
            .slides
            .iter()
            .enumerate()
            .map(|(i, s)| (s.slide_id.as_str(), i))
            .collect();
        let mut patches = Vec::with_capacity(manifest.slides.len());
        for s in &manifest.slides {
            let i = *index
                .get(s.slide_id.as_str())
                .ok_or_else(|| Error::Invalid(format!("slide `{}` is not part of the dataset", s.slide_id)))?;
            patches.push(self.patches[i].clone());
        }
        Dataset::new(manifest.clone(), patches)
    }

    pub fn few_shot(&self, k: usize) -> Result<Dataset> {
        self.restrict(&few_shot_select(&self.manifest, &self.patch_counts(), k)?)
    }
}

/// Parameters of the synthetic slide generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub slides_per_class: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    #[serde(default)]
    pub image: ImageSpec,
    pub seed: u64,
    /// Pixel std of the per-class prototype pattern.
    #[serde(default = "default_proto_std")]
    pub proto_std: f32,
    /// Pixel std of the offset shared by all patches of one slide.
    #[serde(default = "default_slide_std")]
    pub slide_std: f32,
    /// Independent per-patch pixel noise.
    #[serde(default = "default_noise_std")]
    pub noise_std: f32,
}

fn default_proto_std() -> f32 {
    1.0
}
fn default_slide_std() -> f32 {
    1.0
}
fn default_noise_std() -> f32 {
    1.0
}

impl SynthSpec {
    pub fn new(classes: usize, slides_per_class: usize, seed: u64) -> Self {
        SynthSpec {
            classes,
            slides_per_class,
            patches_min: 5,
            patches_max: 20,
            image: ImageSpec::default(),
            seed,
            proto_std: default_proto_std(),
            slide_std: default_slide_std(),
            noise_std: default_noise_std(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Invalid(format!("synthetic data needs at least 2 classes, got {}", self.classes)));
        }
        if self.slides_per_class == 0 || self.patches_min == 0 || self.patches_min > self.patches_max {
            return Err(Error::Invalid(format!(
                "degenerate synthetic spec: {} slides per class, patch range {}..={}",
                self.slides_per_class, self.patches_min, self.patches_max
            )));
        }
        if self.image.numel() == 0 {
            return Err(Error::Invalid("image spec has a zero dimension".into()));
        }
        for (name, v) in [("proto_std", self.proto_std), ("slide_std", self.slide_std), ("noise_std", self.noise_std)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn category_names(&self) -> Vec<String> {
        (0..self.classes).map(|c| format!("class_{c}")).collect()
    }
}

pub fn slide_id(class: usize, index: usize) -> String {
    format!("c{class}_s{index:03}")
}

/// Generates the synthetic dataset in memory. Patch `j` of slide `s` in
/// class `c` is `prototype_c + offset_s + noise_sj`.
pub fn synthesize(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.image.numel();
    let mut proto_rng = rng::stream(spec.seed, "prototypes");
    let prototypes: Vec<Vec<f32>> = (0..spec.classes)
        .map(|_| rng::normal_vec(&mut proto_rng, d, spec.proto_std))
        .collect();
    let mut slides = Vec::new();
    let mut patches = Vec::new();
    for (c, proto) in prototypes.iter().enumerate() {
        for s in 0..spec.slides_per_class {
            let id = slide_id(c, s);
            let mut r = rng::rng(rng::derive(spec.seed, rng::fnv1a64(id.as_bytes())));
            let count = r.random_range(spec.patches_min..=spec.patches_max);
            let offset = rng::normal_vec(&mut r, d, spec.slide_std);
            let ps = (0..count)
                .map(|_| {
                    let noise = rng::normal_vec(&mut r, d, spec.noise_std);
                    let v = proto.iter().zip(&offset).zip(noise).map(|((p, o), n)| p + o + n).collect();
                    Tensor::from_parts(vec![d], v)
                })
                .collect();
            slides.push(SlideEntry {
                patch_paths: vec![format!("patches/{id}.ctns")],
                slide_id: id,
                label: c,
            });
            patches.push(ps);
        }
    }
    let manifest = SlideManifest {
        categories: spec.category_names(),
        split: None,
        image: spec.image,
        slides,
    };
    Dataset::new(manifest, patches)
}

/// Generates the dataset, writes its patch files under `out` and saves the
/// full manifest as `out/manifest.json`.
pub fn synth_generate(spec: &SynthSpec, out: impl AsRef<Path>) -> Result<Dataset> {
    let out = out.as_ref();
    let ds = synthesize(spec)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    ds.write_patches(out)?;
    ds.manifest.save(out.join("manifest.json"))?;
    Ok(ds)
}

/// Per class, the `k` slides with the most patches, ties to the smaller
/// slide id. Slides of the returned manifest keep their original order.
pub fn few_shot_select(manifest: &SlideManifest, patch_counts: &BTreeMap<String, usize>, k: usize) -> Result<SlideManifest> {
    if k == 0 {
        return Err(Error::Config("few-shot k must be at least 1".into()));
    }
    let mut chosen = BTreeSet::new();
    for (c, name) in manifest.categories.iter().enumerate() {
        let mut slides: Vec<(usize, &str)> = manifest
            .slides
            .iter()
            .filter(|s| s.label == c)
            .map(|s| {
                let n = patch_counts.get(&s.slide_id).copied().ok_or_else(|| {
                    Error::Invalid(format!("no patch count for slide `{}`", s.slide_id))
                })?;
                Ok((n, s.slide_id.as_str()))
            })
            .collect::<Result<_>>()?;
        if slides.len() < k {
            return Err(Error::Invalid(format!(
                "class `{name}` has {} slides, fewer than the {k} requested",
                slides.len()
            )));
        }
        slides.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        chosen.extend(slides[..k].iter().map(|(_, id)| id.to_string()));
    }
    Ok(manifest.with_slides(manifest.split, |s| chosen.contains(&s.slide_id)))
}

/// Seeded slide-level split. Each class contributes
/// `max(1, floor(count · train_fraction))` slides to the training side.
pub fn split(manifest: &SlideManifest, train_fraction: f64, seed: u64) -> Result<(SlideManifest, SlideManifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    manifest.validate()?;
    let mut train_ids = BTreeSet::new();
    for (c, name) in manifest.categories.iter().enumerate() {
        let mut ids: Vec<&str> = manifest.slides.iter().filter(|s| s.label == c).map(|s| s.slide_id.as_str()).collect();
        if ids.is_empty() {
            continue;
        }
        if ids.len() == 1 {
            warn!("class `{name}` has a single slide; it goes to the training split");
        }
        ids.shuffle(&mut rng::rng(rng::derive(rng::derive(seed, rng::fnv1a64(b"split")), c as u64)));
        // the small epsilon keeps e.g. 100 × 0.29 from flooring to 28
        let n = ((ids.len() as f64 * train_fraction + 1e-9).floor() as usize).max(1);
        train_ids.extend(ids[..n].iter().map(|s| s.to_string()));
    }
    Ok((
        manifest.with_slides(Some(Split::Train), |s| train_ids.contains(&s.slide_id)),
        manifest.with_slides(Some(Split::Validation), |s| !train_ids.contains(&s.slide_id)),
    ))
}
