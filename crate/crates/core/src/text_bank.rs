//! Fixed per-category text embeddings.
//!
//! On disk a bank is a CTNS file holding one `C × d_l` tensor named
//! `text.embeddings`, plus a JSON sidecar next to it (same stem, `.json`
//! extension) of the form `{"categories": ["name0", "name1", ...]}` listing
//! the row names in order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ctns;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{checksum, Tensor};

pub const TENSOR_NAME: &str = "text.embeddings";

#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    categories: Vec<String>,
    embeddings: Tensor,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    categories: Vec<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl TextBank {
    pub fn new(categories: Vec<String>, embeddings: Tensor) -> Result<Self> {
        if categories.len() < 2 {
            return Err(Error::Invalid(format!("text bank needs at least 2 categories, got {}", categories.len())));
        }
        if embeddings.rank() != 2 || embeddings.shape()[0] != categories.len() {
            return Err(Error::Invalid(format!(
                "{} category names but embedding tensor has shape {:?}",
                categories.len(),
                embeddings.shape()
            )));
        }
        for (i, a) in categories.iter().enumerate() {
            if categories[..i].contains(a) {
                return Err(Error::Invalid(format!("duplicate category name `{a}`")));
            }
        }
        for (i, name) in categories.iter().enumerate() {
            if embeddings.row(i).iter().all(|&v| v == 0.0) {
                return Err(Error::Invalid(format!("embedding of `{name}` is the zero vector")));
            }
            for j in 0..i {
                if embeddings.row(i) == embeddings.row(j) {
                    return Err(Error::Invalid(format!(
                        "categories `{}` and `{name}` have identical embeddings",
                        categories[j]
                    )));
                }
            }
        }
        Ok(TextBank { categories, embeddings })
    }

    /// Deterministic stand-in for a language encoder: each name seeds its own
    /// generator via FNV-1a, draws a standard-normal vector and normalises it.
    pub fn toy_encode(names: &[String], d_l: usize, seed: u64) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Invalid("toy_encode: no names".into()));
        }
        if d_l == 0 {
            return Err(Error::Config("toy_encode: d_l must be positive".into()));
        }
        let mut data = Vec::with_capacity(names.len() * d_l);
        for name in names {
            let mut r = rng::rng(rng::derive(seed, rng::fnv1a64(name.as_bytes())));
            let v: Vec<f64> = rng::normal_vec(&mut r, d_l, 1.0).into_iter().map(f64::from).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(v.iter().map(|x| (x / norm) as f32));
        }
        Self::new(names.to_vec(), Tensor::matrix(names.len(), d_l, data)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut named = ctns::read_ctns(path)?;
        let embeddings = ctns::take_named(&mut named, TENSOR_NAME)
            .ok_or_else(|| Error::Invalid(format!("{}: no `{TENSOR_NAME}` tensor", path.display())))?;
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text)?;
        Self::new(sidecar.categories, embeddings)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        ctns::write_ctns(path, &[(TENSOR_NAME.to_string(), self.embeddings.clone())])?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&Sidecar {
            categories: self.categories.clone(),
        })?;
        fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn get(&self, c: usize) -> Result<Tensor> {
        if c >= self.num_classes() {
            return Err(Error::Invalid(format!(
                "category index {c} out of range for {} categories",
                self.num_classes()
            )));
        }
        Tensor::vector(self.embeddings.row(c).to_vec())
    }

    pub fn checksum(&self) -> String {
        checksum([(TENSOR_NAME, &self.embeddings)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: &[&str]) -> Vec<String> {
        n.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn toy_encoder_is_deterministic_and_normalised() {
        let n = names(&["well", "moderate", "poor"]);
        let a = TextBank::toy_encode(&n, 1024, 3).unwrap();
        let b = TextBank::toy_encode(&n, 1024, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 1024);
        for c in 0..3 {
            let r = a.get(c).unwrap();
            let norm: f64 = r.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        assert_ne!(a, TextBank::toy_encode(&n, 1024, 4).unwrap());
    }

    #[test]
    fn toy_encoder_rejects_duplicates() {
        assert!(TextBank::toy_encode(&names(&["a", "a"]), 8, 0).is_err());
    }

    #[test]
    fn toy_embeddings_are_nearly_orthogonal() {
        let mut large = 0;
        for seed in 0..1000u64 {
            let b = TextBank::toy_encode(&names(&["tubular", "poorly"]), 1024, seed).unwrap();
            let cos: f64 = b.embeddings.row(0).iter().zip(b.embeddings.row(1)).map(|(&x, &y)| x as f64 * y as f64).sum();
            if cos.abs() >= 0.2 {
                large += 1;
            }
        }
        // 0.2 is more than six standard deviations (1/32) for d_l = 1024
        assert_eq!(large, 0);
    }

    #[test]
    fn get_bounds() {
        let b = TextBank::toy_encode(&names(&["a", "b", "c"]), 4, 0).unwrap();
        assert_eq!(b.get(0).unwrap().data(), b.embeddings.row(0));
        assert!(b.get(3).is_err());
    }

    #[test]
    fn load_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.ctns");
        let b = TextBank::toy_encode(&names(&["a", "b", "c"]), 1024, 1).unwrap();
        b.save(&path).unwrap();
        let back = TextBank::load(&path).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.num_classes(), 3);
        assert_eq!(back.dim(), 1024);
        assert_eq!(back.get(2).unwrap(), b.get(2).unwrap());

        // three names, two rows
        let two = Tensor::matrix(2, 4, vec![1.0; 8]).unwrap();
        ctns::write_ctns(&path, &[(TENSOR_NAME.into(), two)]).unwrap();
        assert!(TextBank::load(&path).is_err());
    }

    #[test]
    fn rejects_duplicate_rows_and_zero_rows() {
        let dup = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let err = TextBank::new(names(&["x", "y", "z"]), dup).unwrap_err().to_string();
        assert!(err.contains("`x`") && err.contains("`z`"), "{err}");
        let zero = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(TextBank::new(names(&["x", "y"]), zero).is_err());
    }
}
