//! Workbench for precipitation-reduction interventions against a synthetic
//! toy atmosphere: a residual diffusion forecaster with gradient-guided
//! sampling, a projected-gradient baseline, a cross-architecture transfer
//! model, and the evaluation metrics that compare them.

pub mod attack;
pub mod catalog;
pub mod denoiser;
pub mod dynamics;
pub mod field;
pub mod fld;
pub mod forecaster;
pub mod guidance;
pub mod metrics;
pub mod pca;
pub mod rng;
pub mod schedule;
pub mod transfer;

#[cfg(test)]
pub(crate) mod testkit;
