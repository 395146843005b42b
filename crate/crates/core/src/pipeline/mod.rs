//! The three-stage pipeline, baselines, evaluation, sweeps and plots.

pub mod config;
pub mod eval;
pub mod nets;
pub mod plot;
pub mod results;
pub mod stages;
pub mod sweep;

pub use config::{
    DatasetSection, DecoderInput, DecoderStage, EnvSection, IdmStage, Method, OutputSection, RunConfig,
    StagesSection, SweepSection, TrainStage,
};
pub use eval::{evaluate_policy, Agent, BcAgent, EvalEnv, EvalResult, ExpertAgent, LatentAgent, RandomAgent};
pub use nets::{Decoder, IdmShape, MlpNet, SupervisedIdm};
pub use results::{metrics_csv_bytes, write_metrics_csv, ResultRow, ResultsTable, RESULT_COLUMNS};
pub use stages::{
    action_prediction_mse, normalized_score, probe_target_variances, relabel_latents, train_action_decoder,
    train_bc_baseline, train_idm_relabel_baseline, train_lam, train_latent_bc, train_supervised_idm,
    IdmBaselineRun, LamEpochMetrics, LamRun, LatentLabels, LossCurve,
};
pub use stages::{minimality_probe, ProbeReport};
pub use sweep::{
    eval_seed, label_seed, ladder_configs, method_lam_config, plan, prepare_datasets, stage_seed, Cell, Experiment, StageSeed,
    LADDER_RUNGS, MINIMALITY_MODELS,
};
pub use plot::{render_svg, write_plot, PlotKind, Stat};
