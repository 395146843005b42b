//! Synthetic point-mass control with exogenous, temporally correlated
//! distractors: particles, camera shake and a color gain.

mod dataset;
mod env;
mod expert;
mod format;
mod render;

pub use dataset::{
    collect_dataset, label_order, CollectConfig, Dataset, DatasetMeta, Diagnostics, LabeledView,
    Trajectory,
};
pub use env::{
    distractor_params, DifficultyConfig, DistractorState, EndoState, Env, Particle, ParticleParams,
    Pool, AR_COEF, DRAG, DT, ENVELOPE_SIGMAS, V_MAX,
};
pub use expert::{expert_action, noisy_expert_action, EXPERT_NOISE};
pub use format::{
    load_dataset, read_dataset_header, save_dataset, DatasetHeader, TrajectoryHeader,
    DATASET_MAGIC, DATASET_VERSION,
};
pub use render::{shift_grid, ObsMode, Renderer, GRID_SIDE, VECTOR_DIM};
