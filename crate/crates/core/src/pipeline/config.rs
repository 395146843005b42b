use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::distsuite::{CollectConfig, DifficultyConfig, ObsMode, Pool};
use crate::error::{Error, Result};
use crate::graphgrad::Schedule;
use crate::lam::LamConfig;

/// Environment and evaluation settings shared by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub difficulty: DifficultyConfig,
    pub mode: ObsMode,
    pub mixing_seed: u64,
    pub horizon: usize,
    pub frame_stack: usize,
    pub expert_noise: f64,
    pub eval_episodes: usize,
    /// Distractor pool used for return evaluation.
    pub eval_pool: Pool,
    /// Trajectories collected on the held-out pool for action-prediction MSE.
    pub heldout_trajectories: usize,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            difficulty: DifficultyConfig::default(),
            mode: ObsMode::Vector,
            mixing_seed: 0,
            horizon: 200,
            frame_stack: 3,
            expert_noise: 0.1,
            eval_episodes: 25,
            eval_pool: Pool::Train,
            heldout_trajectories: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Full-scale value: 5000.
    pub num_trajectories: usize,
    pub seed: u64,
    /// Load from here instead of collecting, when set.
    pub path: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { num_trajectories: 400, seed: 0, path: None }
    }
}

/// Epoch-based optimisation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainStage {
    /// Full-scale value: 512.
    pub batch_size: usize,
    /// Full-scale value: 10.
    pub num_epochs: usize,
    /// `None` means one pass over the training samples per epoch.
    pub updates_per_epoch: Option<usize>,
    /// Full-scale value: 0.0001.
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub hidden_dim: usize,
    pub num_res_blocks: usize,
}

impl TrainStage {
    pub fn lam_default() -> Self {
        Self {
            batch_size: 256,
            num_epochs: 20,
            updates_per_epoch: None,
            learning_rate: 1e-3,
            warmup_epochs: 3,
            hidden_dim: 128,
            num_res_blocks: 2,
        }
    }

    pub fn bc_default() -> Self {
        Self { warmup_epochs: 0, ..Self::lam_default() }
    }

    pub fn updates_per_epoch(&self, n_samples: usize) -> usize {
        self.updates_per_epoch
            .unwrap_or_else(|| n_samples.div_ceil(self.batch_size.max(1)))
            .max(1)
    }

    pub fn schedule(&self, n_samples: usize) -> Result<Schedule> {
        let per = self.updates_per_epoch(n_samples) as u64;
        let total = per * self.num_epochs as u64;
        let warmup = (per * self.warmup_epochs as u64).min(total);
        Schedule::new(self.learning_rate, warmup, total)
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.batch_size == 0 || self.num_epochs == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(format!("{what}: batch_size, num_epochs, hidden_dim must be >= 1")));
        }
        if self.updates_per_epoch == Some(0) {
            return Err(Error::Config(format!("{what}: updates_per_epoch must be >= 1")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("{what}: learning_rate must be > 0")));
        }
        Ok(())
    }
}

impl Default for TrainStage {
    fn default() -> Self {
        Self::bc_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecoderInput {
    /// Latents predicted by the frozen latent policy.
    Policy,
    /// Latents inferred by the LAM IDM on labeled transitions; at evaluation
    /// the decoder reads the policy's prediction.
    #[default]
    Lam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderStage {
    /// Full-scale value: 0.0003.
    pub learning_rate: f64,
    /// Full-scale value: 2500.
    pub total_updates: usize,
    /// Full-scale value: 256.
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub input: DecoderInput,
}

impl Default for DecoderStage {
    fn default() -> Self {
        Self { learning_rate: 3e-4, total_updates: 2500, hidden_dim: 64, batch_size: 256, input: DecoderInput::Lam }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdmStage {
    pub batch_size: usize,
    /// Full-scale value: 10000.
    pub total_updates: usize,
    pub learning_rate: f64,
    pub warmup_updates: usize,
    pub hidden_dim: usize,
    pub repr_dim: usize,
    pub num_res_blocks: usize,
    /// K for the multi-step IDM used in the minimality report; the relabeling
    /// baseline always uses 1.
    pub future_obs_offset: usize,
}

impl Default for IdmStage {
    fn default() -> Self {
        Self {
            batch_size: 256,
            total_updates: 3000,
            learning_rate: 1e-3,
            warmup_updates: 300,
            hidden_dim: 128,
            repr_dim: 64,
            num_res_blocks: 2,
            future_obs_offset: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagesSection {
    pub lam: TrainStage,
    pub probe_learning_rate: f64,
    pub bc: TrainStage,
    pub decoder: DecoderStage,
    pub idm: IdmStage,
    /// Offset used when relabeling the dataset with latent actions.
    pub k_relabel: usize,
    /// Probe training in the minimality report.
    pub minimality_probe_updates: usize,
    pub minimality_probe_learning_rate: f64,
}

impl Default for StagesSection {
    fn default() -> Self {
        Self {
            lam: TrainStage::lam_default(),
            probe_learning_rate: 3e-2,
            bc: TrainStage::bc_default(),
            decoder: DecoderStage::default(),
            idm: IdmStage::default(),
            k_relabel: 1,
            minimality_probe_updates: 2000,
            minimality_probe_learning_rate: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "BC")]
    Bc,
    #[serde(rename = "IDM_RELABEL")]
    IdmRelabel,
    #[serde(rename = "LAPO")]
    Lapo,
    #[serde(rename = "LAOM")]
    Laom,
    #[serde(rename = "LAOM_SUP")]
    LaomSup,
    #[serde(rename = "BC_FULL")]
    BcFull,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Bc => "BC",
            Method::IdmRelabel => "IDM_RELABEL",
            Method::Lapo => "LAPO",
            Method::Laom => "LAOM",
            Method::LaomSup => "LAOM_SUP",
            Method::BcFull => "BC_FULL",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub methods: Vec<Method>,
    /// Labeled trajectories; 10 of 400 is 2.5%.
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    pub latent_dims: Vec<usize>,
    pub budget_sweep: bool,
    pub dim_sweep: bool,
    pub ablation_ladder: bool,
    pub minimality: bool,
    /// Also run the two quantization rungs on the distractor-free dataset.
    pub clean_quantization: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            methods: vec![Method::Bc, Method::IdmRelabel, Method::Lapo, Method::Laom, Method::LaomSup],
            budgets: vec![1, 2, 4, 8, 10],
            seeds: vec![0, 1, 2],
            latent_dims: vec![8, 16, 64, 256],
            budget_sweep: true,
            dim_sweep: true,
            ablation_ladder: true,
            minimality: true,
            clean_quantization: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub save_checkpoints: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/default"), save_checkpoints: true }
    }
}

/// LAM settings per method; the `lam` section applies to LAOM and
/// LAOM_SUP, `lapo` to LAPO.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvSection,
    pub dataset: DatasetSection,
    pub lam: LamConfig,
    pub lapo: LamConfig,
    pub stages: StagesSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvSection::default(),
            dataset: DatasetSection::default(),
            lam: LamConfig::laom(),
            lapo: LamConfig::lapo(),
            stages: StagesSection::default(),
            sweep: SweepSection::default(),
            output: OutputSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses a possibly partial document. Given keys override the defaults
    /// at any depth, so `{"lapo": {"use_fsq": false}}` keeps the other LAPO
    /// settings.
    pub fn from_json(text: &str) -> Result<Self> {
        let given: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !given.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let mut merged = serde_json::to_value(Self::default()).expect("config serializes");
        merge(&mut merged, given);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.env.difficulty.validate()?;
        if self.env.horizon == 0 || self.env.frame_stack == 0 || self.dataset.num_trajectories == 0 {
            return Err(Error::Config("horizon, frame_stack and num_trajectories must be >= 1".into()));
        }
        self.lam.validate()?;
        self.lapo.validate()?;
        self.stages.lam.validate("stages.lam")?;
        self.stages.bc.validate("stages.bc")?;
        if self.stages.k_relabel < 1 {
            return Err(Error::Config("k_relabel must be >= 1".into()));
        }
        for (name, k) in [("lam", self.lam.future_obs_offset), ("lapo", self.lapo.future_obs_offset)] {
            if k > self.env.horizon {
                return Err(Error::Config(format!("{name}.future_obs_offset exceeds the horizon")));
            }
        }
        if let Some(&b) = self.sweep.budgets.iter().find(|&&b| b > self.dataset.num_trajectories) {
            return Err(Error::Config(format!("budget {b} exceeds num_trajectories")));
        }
        if self.sweep.budgets.is_empty() || self.sweep.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one budget and one seed".into()));
        }
        Ok(())
    }

    pub fn max_budget(&self) -> usize {
        self.sweep.budgets.iter().copied().max().unwrap_or(0)
    }

    pub fn collect_config(&self) -> CollectConfig {
        CollectConfig {
            n_traj: self.dataset.num_trajectories,
            horizon: self.env.horizon,
            difficulty: self.env.difficulty.clone(),
            mode: self.env.mode,
            frame_stack: self.env.frame_stack,
            env_seed: self.dataset.seed,
            mixing_seed: self.env.mixing_seed,
            label_seed: self.dataset.seed,
            label_budget: self.max_budget().min(self.dataset.num_trajectories),
            expert_noise: self.env.expert_noise,
            pool: Pool::Train,
        }
    }

    /// Held-out trajectories on the eval distractor pool.
    pub fn heldout_config(&self) -> CollectConfig {
        CollectConfig {
            n_traj: self.env.heldout_trajectories.max(1),
            env_seed: crate::rng::derive_seed(self.dataset.seed, &[crate::rng::tag::EVAL]),
            label_budget: 0,
            pool: Pool::Eval,
            ..self.collect_config()
        }
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}
