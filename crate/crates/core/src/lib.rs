//! Unsupervised domain adaptation for text classifiers: adversarial
//! adaptation with distillation, the DDC / DANN / deep CORAL baselines, a
//! synthetic domain-shift benchmark, and exact signed-rank significance
//! testing, all on a small `f64` reverse-mode autodiff core.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
