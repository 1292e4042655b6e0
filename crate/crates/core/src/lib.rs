pub mod autodiff;
pub mod baselines;
pub mod check;
pub mod config;
pub mod ctns;
pub mod data;
pub mod error;
pub mod eval;
pub mod head;
pub mod model;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod text_bank;
pub mod trainer;
pub mod vit;

pub use config::{ExperimentConfig, FreezePolicy, HeadKind};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
