use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::nets::{Decoder, MlpNet};
use crate::distsuite::{noisy_expert_action, DifficultyConfig, Env, Pool, Renderer};
use crate::error::{Error, Result};
use crate::graphgrad::Tensor;
use crate::rng::{self, tag, Rng};

/// Chooses actions for a batch of environments stepped in lockstep.
/// `obs` holds one stacked observation per environment.
pub trait Agent {
    fn act(&mut self, envs: &[Env], obs: &Tensor) -> Result<Vec<[f64; 2]>>;
}

fn rows_to_actions(t: &Tensor) -> Result<Vec<[f64; 2]>> {
    if t.cols() != 2 {
        return Err(Error::shape("agent", format!("action head has {} outputs", t.cols())));
    }
    Ok((0..t.rows()).map(|r| [t.row(r)[0], t.row(r)[1]]).collect())
}

/// The scripted expert, reading the true state.
pub struct ExpertAgent {
    pub sigma: f64,
    pub rng: Rng,
}

impl Agent for ExpertAgent {
    fn act(&mut self, envs: &[Env], _obs: &Tensor) -> Result<Vec<[f64; 2]>> {
        Ok(envs.iter().map(|e| noisy_expert_action(e.endo(), self.sigma, &mut self.rng)).collect())
    }
}

/// Uniform actions on [-1, 1]².
pub struct RandomAgent {
    pub rng: Rng,
}

impl Agent for RandomAgent {
    fn act(&mut self, envs: &[Env], _obs: &Tensor) -> Result<Vec<[f64; 2]>> {
        Ok(envs
            .iter()
            .map(|_| [self.rng.random_range(-1.0..=1.0), self.rng.random_range(-1.0..=1.0)])
            .collect())
    }
}

/// A policy regressing actions directly.
pub struct BcAgent<'a> {
    pub policy: &'a MlpNet,
}

impl Agent for BcAgent<'_> {
    fn act(&mut self, _envs: &[Env], obs: &Tensor) -> Result<Vec<[f64; 2]>> {
        rows_to_actions(&self.policy.predict(obs)?)
    }
}

/// `a = decoder(policy(stack))`.
pub struct LatentAgent<'a> {
    pub policy: &'a MlpNet,
    pub decoder: &'a Decoder,
}

impl Agent for LatentAgent<'_> {
    fn act(&mut self, _envs: &[Env], obs: &Tensor) -> Result<Vec<[f64; 2]>> {
        rows_to_actions(&self.decoder.predict(&self.policy.predict(obs)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

impl EvalResult {
    fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt(), returns }
    }
}

/// What an evaluation needs to know about the environment.
#[derive(Debug, Clone)]
pub struct EvalEnv {
    pub difficulty: DifficultyConfig,
    pub renderer: Renderer,
    pub frame_stack: usize,
    pub horizon: usize,
}

impl EvalEnv {
    pub fn from_meta(meta: &crate::distsuite::DatasetMeta, horizon: usize) -> Self {
        Self {
            difficulty: meta.difficulty.clone(),
            renderer: meta.renderer(),
            frame_stack: meta.frame_stack,
            horizon,
        }
    }
}

/// Runs `episodes` rollouts in lockstep and returns the return statistics.
/// Episode `i` has its own reset and pool-seed streams, so results do not
/// depend on how many episodes run.
pub fn evaluate_policy(agent: &mut dyn Agent, env: &EvalEnv, episodes: usize, pool: Pool, seed: u64) -> Result<EvalResult> {
    if episodes == 0 {
        return Ok(EvalResult::from_returns(Vec::new()));
    }
    let seeds = env.difficulty.pool_seeds(pool);
    let mut envs = (0..episodes as u64)
        .map(|i| {
            let pool_seed = rng::stream(seed, &[tag::EVAL, i, tag::POOL]).random_range(seeds.clone());
            Env::reset(rng::derive_seed(seed, &[tag::EVAL, i]), pool_seed, &env.difficulty)
        })
        .collect::<Result<Vec<_>>>()?;
    let d = env.renderer.obs_dim();
    let s = env.frame_stack;
    // Ring of the last `s` frames per episode, oldest first.
    let mut frames: Vec<Vec<Vec<f64>>> = envs
        .iter()
        .map(|e| vec![env.renderer.render(e.endo(), e.distractor()); s])
        .collect();
    let mut returns = vec![0.0; episodes];
    for _ in 0..env.horizon {
        let mut data = Vec::with_capacity(episodes * d * s);
        for f in &frames {
            for frame in f {
                data.extend_from_slice(frame);
            }
        }
        let obs = Tensor::matrix(episodes, d * s, data)?;
        let actions = agent.act(&envs, &obs)?;
        for (i, e) in envs.iter_mut().enumerate() {
            let a = actions[i];
            if !a.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { node: 0, op: "policy action" });
            }
            returns[i] += e.step([a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)])?;
            frames[i].remove(0);
            frames[i].push(env.renderer.render(e.endo(), e.distractor()));
        }
    }
    Ok(EvalResult::from_returns(returns))
}
