//! Latent action learning under exogenous distractors, at desk scale.
//!
//! - [`graphgrad`]: tensors, reverse-mode autodiff, Adam, schedules, EMA, FSQ
//! - [`distsuite`]: synthetic control tasks with temporally correlated distractors
//! - [`lam`]: LAPO-style and LAOM-style latent action models, probes, augmentations
//! - [`pipeline`]: the three-stage pipeline, baselines, sweeps and reports

pub(crate) mod container;
pub mod error;
pub mod distsuite;
pub mod graphgrad;
pub mod lam;
pub mod pipeline;
pub mod rng;

pub use error::{Error, ErrorCategory, Result};
