use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::env::{DifficultyConfig, Env, Pool};
use super::expert::noisy_expert_action;
use super::render::{ObsMode, Renderer};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Dataset collection settings. Desk defaults: 400 trajectories of 200
/// steps (full scale: 5000 trajectories), frame stack 3, label budget 10
/// (2.5% of 400).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectConfig {
    pub n_traj: usize,
    pub horizon: usize,
    pub difficulty: DifficultyConfig,
    pub mode: ObsMode,
    pub frame_stack: usize,
    pub env_seed: u64,
    pub mixing_seed: u64,
    pub label_seed: u64,
    pub label_budget: usize,
    pub expert_noise: f64,
    pub pool: Pool,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            n_traj: 400,
            horizon: 200,
            difficulty: DifficultyConfig::default(),
            mode: ObsMode::Vector,
            frame_stack: 3,
            env_seed: 0,
            mixing_seed: 0,
            label_seed: 0,
            label_budget: 10,
            expert_noise: 0.1,
            pool: Pool::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub difficulty: DifficultyConfig,
    pub mode: ObsMode,
    pub frame_stack: usize,
    pub d_obs: usize,
    pub env_seed: u64,
    pub mixing_seed: u64,
    pub label_seed: u64,
    pub expert_noise: f64,
    pub pool: Pool,
}

impl DatasetMeta {
    pub fn renderer(&self) -> Renderer {
        Renderer::new(self.mode, self.mixing_seed, self.difficulty.n_particles)
    }

    pub fn stacked_dim(&self) -> usize {
        self.d_obs * self.frame_stack
    }

    pub fn distractor_dim(&self) -> usize {
        self.difficulty.distractor_dim()
    }
}

/// One expert episode. Actions and hidden states are not reachable from
/// here; see [`LabeledView`] and [`Diagnostics`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub(crate) horizon: usize,
    pub(crate) pool_seed: u64,
    pub(crate) observations: Vec<f64>,
    pub(crate) actions: Vec<f64>,
    pub(crate) rewards: Vec<f64>,
    pub(crate) endo: Vec<f64>,
    pub(crate) distractor: Vec<f64>,
}

impl Trajectory {
    /// Number of transitions (observations are one more).
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn pool_seed(&self) -> u64 {
        self.pool_seed
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn observation(&self, t: usize, d_obs: usize) -> &[f64] {
        &self.observations[t * d_obs..(t + 1) * d_obs]
    }

    /// Appends frames `t-stack+1 ..= t` (clamped at the episode start) to `out`.
    pub fn stack_into(&self, t: usize, d_obs: usize, stack: usize, out: &mut Vec<f64>) {
        for back in (0..stack).rev() {
            let s = t.saturating_sub(back);
            out.extend_from_slice(self.observation(s, d_obs));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub(crate) meta: DatasetMeta,
    pub(crate) trajectories: Vec<Trajectory>,
    pub(crate) label_mask: Vec<bool>,
}

impl Dataset {
    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn label_mask(&self) -> &[bool] {
        &self.label_mask
    }

    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.horizon).sum()
    }

    pub fn n_observations(&self) -> usize {
        self.trajectories.iter().map(|t| t.horizon + 1).sum()
    }

    pub fn mean_return(&self) -> f64 {
        let n = self.trajectories.len().max(1) as f64;
        self.trajectories.iter().map(|t| t.episode_return()).sum::<f64>() / n
    }

    /// Stacked observation at step `t` of trajectory `traj`.
    pub fn stacked(&self, traj: usize, t: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.meta.stacked_dim());
        self.trajectories[traj].stack_into(t, self.meta.d_obs, self.meta.frame_stack, &mut out);
        out
    }

    pub fn stacked_into(&self, traj: usize, t: usize, out: &mut Vec<f64>) {
        self.trajectories[traj].stack_into(t, self.meta.d_obs, self.meta.frame_stack, out);
    }

    /// The training-facing label gate: the first `budget` trajectories of a
    /// seeded permutation, so budgets nest for a fixed seed.
    pub fn labeled_view(&self, budget: usize, seed: u64) -> Result<LabeledView<'_>> {
        if budget > self.len() {
            return Err(Error::OutOfRange(format!(
                "label budget {budget} exceeds {} trajectories",
                self.len()
            )));
        }
        let mut chosen = label_order(self.len(), seed);
        chosen.truncate(budget);
        chosen.sort_unstable();
        let mut member = vec![false; self.len()];
        for &i in &chosen {
            member[i] = true;
        }
        Ok(LabeledView { ds: self, chosen, member })
    }

    /// Every trajectory labeled; used for the normalization run.
    pub fn full_view(&self) -> LabeledView<'_> {
        LabeledView { ds: self, chosen: (0..self.len()).collect(), member: vec![true; self.len()] }
    }

    /// Hidden annotations for probes and evaluation metrics only. Training
    /// code must go through [`LabeledView`].
    pub fn diagnostics(&self) -> Diagnostics<'_> {
        Diagnostics { ds: self }
    }
}

/// Trajectory indices in label-reveal order for `seed`.
pub fn label_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::LABELS]));
    order
}

/// Read access to ground-truth actions of a fixed trajectory subset.
#[derive(Debug, Clone)]
pub struct LabeledView<'a> {
    ds: &'a Dataset,
    chosen: Vec<usize>,
    member: Vec<bool>,
}

impl<'a> LabeledView<'a> {
    pub fn dataset(&self) -> &'a Dataset {
        self.ds
    }

    pub fn budget(&self) -> usize {
        self.chosen.len()
    }

    /// Labeled trajectory indices, ascending.
    pub fn trajectories(&self) -> &[usize] {
        &self.chosen
    }

    pub fn contains(&self, traj: usize) -> bool {
        self.member.get(traj).copied().unwrap_or(false)
    }

    pub fn actions(&self, traj: usize) -> Result<&'a [f64]> {
        if !self.contains(traj) {
            return Err(Error::AccessDenied(format!("trajectory {traj} is outside the labeled view")));
        }
        Ok(&self.ds.trajectories[traj].actions)
    }

    pub fn action(&self, traj: usize, t: usize) -> Result<[f64; 2]> {
        let a = self.actions(traj)?;
        Ok([a[2 * t], a[2 * t + 1]])
    }

    pub fn n_transitions(&self) -> usize {
        self.chosen.iter().map(|&i| self.ds.trajectories[i].horizon).sum()
    }
}

/// Diagnostic side channel: ground truth for probes and reports.
#[derive(Debug, Clone, Copy)]
pub struct Diagnostics<'a> {
    ds: &'a Dataset,
}

impl<'a> Diagnostics<'a> {
    pub fn action(&self, traj: usize, t: usize) -> [f64; 2] {
        let a = &self.ds.trajectories[traj].actions;
        [a[2 * t], a[2 * t + 1]]
    }

    pub fn actions(&self, traj: usize) -> &'a [f64] {
        &self.ds.trajectories[traj].actions
    }

    pub fn endo(&self, traj: usize, t: usize) -> &'a [f64] {
        &self.ds.trajectories[traj].endo[t * 6..(t + 1) * 6]
    }

    pub fn distractor(&self, traj: usize, t: usize) -> &'a [f64] {
        let d = self.ds.meta.distractor_dim();
        &self.ds.trajectories[traj].distractor[t * d..(t + 1) * d]
    }
}

/// Rolls out the noisy scripted expert for `cfg.n_traj` episodes. Each
/// trajectory has its own seed streams, so output is order-independent.
pub fn collect_dataset(cfg: &CollectConfig) -> Result<Dataset> {
    if cfg.n_traj == 0 || cfg.horizon == 0 || cfg.frame_stack == 0 {
        return Err(Error::Config("n_traj, horizon and frame_stack must be >= 1".into()));
    }
    cfg.difficulty.validate()?;
    if cfg.label_budget > cfg.n_traj {
        return Err(Error::Config(format!(
            "label budget {} exceeds {} trajectories",
            cfg.label_budget, cfg.n_traj
        )));
    }
    let renderer = Renderer::new(cfg.mode, cfg.mixing_seed, cfg.difficulty.n_particles);
    let meta = DatasetMeta {
        difficulty: cfg.difficulty.clone(),
        mode: cfg.mode,
        frame_stack: cfg.frame_stack,
        d_obs: cfg.mode.obs_dim(),
        env_seed: cfg.env_seed,
        mixing_seed: cfg.mixing_seed,
        label_seed: cfg.label_seed,
        expert_noise: cfg.expert_noise,
        pool: cfg.pool,
    };
    let pool = cfg.difficulty.pool_seeds(cfg.pool);
    let trajectories = (0..cfg.n_traj)
        .map(|i| {
            let i = i as u64;
            let pool_seed = rng::stream(cfg.env_seed, &[tag::TRAJ, i, tag::POOL])
                .random_range(pool.clone());
            let env_seed = rng::derive_seed(cfg.env_seed, &[tag::TRAJ, i]);
            let mut expert_rng = rng::stream(cfg.env_seed, &[tag::EXPERT, i]);
            rollout(&renderer, &cfg.difficulty, env_seed, pool_seed, cfg.horizon, |env| {
                Ok(noisy_expert_action(env.endo(), cfg.expert_noise, &mut expert_rng))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset { meta, trajectories, label_mask: Vec::new() };
    let view = ds.labeled_view(cfg.label_budget, cfg.label_seed)?;
    let mask = (0..ds.len()).map(|i| view.contains(i)).collect();
    ds.label_mask = mask;
    Ok(ds)
}

pub(crate) fn rollout(
    renderer: &Renderer,
    difficulty: &DifficultyConfig,
    env_seed: u64,
    pool_seed: u64,
    horizon: usize,
    mut policy: impl FnMut(&Env) -> Result<[f64; 2]>,
) -> Result<Trajectory> {
    let mut env = Env::reset(env_seed, pool_seed, difficulty)?;
    let d_obs = renderer.obs_dim();
    let mut tr = Trajectory {
        horizon,
        pool_seed,
        observations: Vec::with_capacity((horizon + 1) * d_obs),
        actions: Vec::with_capacity(horizon * 2),
        rewards: Vec::with_capacity(horizon),
        endo: Vec::with_capacity((horizon + 1) * 6),
        distractor: Vec::with_capacity((horizon + 1) * difficulty.distractor_dim()),
    };
    let record = |env: &Env, tr: &mut Trajectory| {
        tr.observations.extend(renderer.render(env.endo(), env.distractor()));
        tr.endo.extend_from_slice(&env.endo().to_array());
        tr.distractor.extend(env.distractor().features());
    };
    record(&env, &mut tr);
    for _ in 0..horizon {
        let a = policy(&env)?;
        let a = [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)];
        let r = env.step(a)?;
        tr.actions.extend_from_slice(&a);
        tr.rewards.push(r);
        record(&env, &mut tr);
    }
    Ok(tr)
}
