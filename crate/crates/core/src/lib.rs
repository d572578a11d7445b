//! Causal semantic generative (CSG) models.
//!
//! The crate provides a small reverse-mode differentiation core, the
//! Gaussian machinery for block-Cholesky priors and diagonal posteriors, the
//! neural components of a CSG, every training objective and prediction rule
//! (CSG, CSG-ind, CSG-DA, the CSGz ablation and a cross-entropy baseline),
//! numerical evaluations of the identifiability and OOD-generalization
//! quantities, dataset construction and a deterministic training loop.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gaussian;
pub mod model;
pub mod objectives;
#[cfg(test)]
pub(crate) mod oracle;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
