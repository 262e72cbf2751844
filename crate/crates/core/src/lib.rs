//! Variational Bayesian inference for linear models with sparsity-promoting
//! scale-mixture priors.
//!
//! The crate couples an EM iteration for the MAP estimate with a mean-field
//! VBEM iteration for a Gaussian posterior approximation, and provides exact
//! and low-rank online variants, hyperparameter learning, and an FFT-based
//! total-variation deconvolution model.

pub(crate) mod dense;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod gaussian;
pub mod gig;
pub mod hyper;
pub mod model;
pub mod online;
pub mod special;
pub mod tvop;
pub mod vbl;

pub use error::{Error, Result};
