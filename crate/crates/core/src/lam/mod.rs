//! Latent action models: LAPO-style (reconstruction, optional FSQ) and
//! LAOM-style (shared encoder, multi-step IDM, latent consistency, optional
//! action supervision), plus probes and augmentations.

mod augment;
mod batch;
mod config;
mod model;
mod probe;

pub use augment::{augment, augment_pair};
pub use batch::{sample_batch, sample_labeled_batch, sample_offset, LabeledBatch, LamBatch};
pub use config::{AugmentationConfig, LamConfig, SupGradFlow, TargetMode, Variant};
pub use model::{LamModel, LossOutput};
pub use probe::{target_variance, Probe, ProbeKind};
