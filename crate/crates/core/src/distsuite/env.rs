use std::ops::Range;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag, Rng};

pub const DT: f64 = 0.1;
pub const DRAG: f64 = 0.1;
pub const V_MAX: f64 = 2.0;
/// AR(1) coefficient of the camera-shake and color-gain processes.
pub const AR_COEF: f64 = 0.95;
/// Distractor scalars are clipped to this many stationary standard deviations.
pub const ENVELOPE_SIGMAS: f64 = 6.0;

/// Distractor difficulty. All scales zero with no particles is the
/// distractor-free setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DifficultyConfig {
    pub n_particles: usize,
    pub shake_scale: f64,
    pub gain_scale: f64,
    pub particle_speed: f64,
    pub train_pool_size: u64,
    pub eval_pool_size: u64,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        // 60 training distractor parameterizations at scale 0.1, as with the
        // background-video pool of the original benchmark.
        Self {
            n_particles: 4,
            shake_scale: 0.1,
            gain_scale: 0.1,
            particle_speed: 0.5,
            train_pool_size: 60,
            eval_pool_size: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Train,
    Eval,
}

impl DifficultyConfig {
    pub fn none() -> Self {
        Self {
            n_particles: 0,
            shake_scale: 0.0,
            gain_scale: 0.0,
            particle_speed: 0.0,
            ..Self::default()
        }
    }

    pub fn is_distractor_free(&self) -> bool {
        self.n_particles == 0 && self.shake_scale == 0.0 && self.gain_scale == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let scales = [self.shake_scale, self.gain_scale, self.particle_speed];
        if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Config(format!("difficulty scales must be >= 0: {self:?}")));
        }
        if self.train_pool_size == 0 || self.eval_pool_size == 0 {
            return Err(Error::Config("distractor pools must be non-empty".into()));
        }
        Ok(())
    }

    /// Train seeds are `0..train`, eval seeds follow, so the pools are disjoint.
    pub fn pool_seeds(&self, pool: Pool) -> Range<u64> {
        match pool {
            Pool::Train => 0..self.train_pool_size,
            Pool::Eval => self.train_pool_size..self.train_pool_size + self.eval_pool_size,
        }
    }

    pub fn pool_of(&self, pool_seed: u64) -> Option<Pool> {
        [Pool::Train, Pool::Eval]
            .into_iter()
            .find(|&p| self.pool_seeds(p).contains(&pool_seed))
    }

    /// Dimension of the distractor probe target: shake, gain, particle positions.
    pub fn distractor_dim(&self) -> usize {
        2 + 2 * self.n_particles
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndoState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub goal: [f64; 2],
}

impl EndoState {
    pub fn to_array(&self) -> [f64; 6] {
        [self.pos[0], self.pos[1], self.vel[0], self.vel[1], self.goal[0], self.goal[1]]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self { pos: [s[0], s[1]], vel: [s[2], s[3]], goal: [s[4], s[5]] }
    }

    pub fn reward(&self) -> f64 {
        let d = ((self.pos[0] - self.goal[0]).powi(2) + (self.pos[1] - self.goal[1]).powi(2)).sqrt();
        1.0 - (d / (2.0 * std::f64::consts::SQRT_2)).min(1.0)
    }

    /// One control step: position integrates the old velocity, then velocity
    /// integrates the action with drag.
    pub fn step(&self, action: [f64; 2]) -> Self {
        let mut next = *self;
        for i in 0..2 {
            next.pos[i] = (self.pos[i] + DT * self.vel[i]).clamp(-1.0, 1.0);
            next.vel[i] = ((1.0 - DRAG) * self.vel[i] + DT * action[i]).clamp(-V_MAX, V_MAX);
        }
        next
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
}

/// Per-particle dynamics, a pure function of the pool seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleParams {
    pub theta: f64,
    pub rho: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorState {
    pub particles: Vec<Particle>,
    pub shake: f64,
    pub gain: f64,
    pub pool_seed: u64,
}

impl DistractorState {
    /// Probe target: `[shake, gain, x₁, y₁, …]`.
    pub fn features(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(2 + 2 * self.particles.len());
        f.push(self.shake);
        f.push(self.gain);
        for p in &self.particles {
            f.extend_from_slice(&p.pos);
        }
        f
    }
}

pub fn distractor_params(pool_seed: u64, n_particles: usize) -> Vec<ParticleParams> {
    let mut r = rng::stream(pool_seed, &[tag::POOL]);
    (0..n_particles)
        .map(|_| ParticleParams {
            theta: r.random_range(0.05..=0.3),
            rho: r.random_range(0.97..=0.999),
            noise: r.random_range(0.5..=1.5),
        })
        .collect()
}

fn gauss(r: &mut Rng) -> f64 {
    StandardNormal.sample(r)
}

fn ar1_step(x: f64, scale: f64, r: &mut Rng) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    let innov = scale * (1.0 - AR_COEF * AR_COEF).sqrt() * gauss(r);
    (AR_COEF * x + innov).clamp(-ENVELOPE_SIGMAS * scale, ENVELOPE_SIGMAS * scale)
}

/// One environment instance: control state, distractor state, and the
/// distractor noise stream. Distractor updates never read the control state.
#[derive(Debug, Clone)]
pub struct Env {
    difficulty: DifficultyConfig,
    params: Vec<ParticleParams>,
    endo: EndoState,
    dist: DistractorState,
    noise: Rng,
}

impl Env {
    pub fn reset(env_seed: u64, pool_seed: u64, difficulty: &DifficultyConfig) -> Result<Self> {
        difficulty.validate()?;
        if difficulty.pool_of(pool_seed).is_none() {
            return Err(Error::OutOfRange(format!("pool seed {pool_seed} is in neither pool")));
        }
        let mut r = rng::stream(env_seed, &[tag::ENV]);
        let mut uni = || [r.random_range(-0.8..=0.8), r.random_range(-0.8..=0.8)];
        let pos = uni();
        let goal = uni();
        let endo = EndoState { pos, vel: [0.0; 2], goal };

        let params = distractor_params(pool_seed, difficulty.n_particles);
        let mut noise = rng::stream(env_seed, &[tag::DISTRACTOR, pool_seed]);
        let particles = params
            .iter()
            .map(|p| {
                let sigma = difficulty.particle_speed * DT * p.noise;
                let stationary = sigma / (1.0 - p.rho * p.rho).sqrt();
                Particle {
                    pos: [stationary * gauss(&mut noise), stationary * gauss(&mut noise)],
                    vel: [0.0; 2],
                }
            })
            .collect();
        let env_clip = |v: f64, s: f64| v.clamp(-ENVELOPE_SIGMAS * s, ENVELOPE_SIGMAS * s);
        let shake = env_clip(difficulty.shake_scale * gauss(&mut noise), difficulty.shake_scale);
        let gain = env_clip(difficulty.gain_scale * gauss(&mut noise), difficulty.gain_scale);
        let dist = DistractorState { particles, shake, gain, pool_seed };
        Ok(Self { difficulty: difficulty.clone(), params, endo, dist, noise })
    }

    pub fn endo(&self) -> &EndoState {
        &self.endo
    }

    pub fn distractor(&self) -> &DistractorState {
        &self.dist
    }

    pub fn difficulty(&self) -> &DifficultyConfig {
        &self.difficulty
    }

    /// Advances both processes; returns the reward of the new state.
    pub fn step(&mut self, action: [f64; 2]) -> Result<f64> {
        if !action.iter().all(|a| a.is_finite()) {
            return Err(Error::OutOfRange(format!("non-finite action {action:?}")));
        }
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        self.endo = self.endo.step(a);
        self.step_distractors();
        Ok(self.endo.reward())
    }

    fn step_distractors(&mut self) {
        let speed = self.difficulty.particle_speed;
        for (p, prm) in self.dist.particles.iter_mut().zip(&self.params) {
            let (s, c) = prm.theta.sin_cos();
            let [x, y] = p.pos;
            let sigma = speed * DT * prm.noise;
            let nx = prm.rho * (c * x - s * y) + sigma * gauss(&mut self.noise);
            let ny = prm.rho * (s * x + c * y) + sigma * gauss(&mut self.noise);
            p.vel = [(nx - x) / DT, (ny - y) / DT];
            p.pos = [nx, ny];
        }
        self.dist.shake = ar1_step(self.dist.shake, self.difficulty.shake_scale, &mut self.noise);
        self.dist.gain = ar1_step(self.dist.gain, self.difficulty.gain_scale, &mut self.noise);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reset_is_deterministic() {
        let d = DifficultyConfig::default();
        let a = Env::reset(3, 5, &d).unwrap();
        let b = Env::reset(3, 5, &d).unwrap();
        assert_eq!(a.endo(), b.endo());
        assert_eq!(a.distractor(), b.distractor());
        assert!(Env::reset(3, 10_000, &d).is_err());
    }

    #[test]
    fn pool_seeds_derive_distinct_parameters() {
        let mut seen: Vec<Vec<(u64, u64, u64)>> = Vec::new();
        for seed in 0..100 {
            let key: Vec<_> = distractor_params(seed, 4)
                .iter()
                .map(|p| (p.theta.to_bits(), p.rho.to_bits(), p.noise.to_bits()))
                .collect();
            assert!(!seen.contains(&key), "collision at {seed}");
            seen.push(key);
        }
        assert_ne!(distractor_params(0, 1)[0].theta, distractor_params(1, 1)[0].theta);
        for p in distractor_params(9, 32) {
            assert!((0.05..=0.3).contains(&p.theta));
            assert!((0.97..=0.999).contains(&p.rho));
        }
    }

    #[test]
    fn rest_keeps_position_while_distractors_move() {
        let d = DifficultyConfig::default();
        let mut env = Env::reset(1, 2, &d).unwrap();
        let before = *env.endo();
        let dist_before = env.distractor().clone();
        env.step([0.0, 0.0]).unwrap();
        assert_eq!(env.endo().pos, before.pos);
        assert_ne!(env.distractor(), &dist_before);
        assert!(env.step([f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn reward_at_goal_is_one() {
        let e = EndoState { pos: [0.3, -0.2], vel: [0.0; 2], goal: [0.3, -0.2] };
        assert_eq!(e.reward(), 1.0);
        let far = EndoState { pos: [-1.0, -1.0], vel: [0.0; 2], goal: [1.0, 1.0] };
        assert_eq!(far.reward(), 0.0);
    }

    #[test]
    fn distractor_free_has_no_distractor_state() {
        let d = DifficultyConfig::none();
        let mut env = Env::reset(4, 0, &d).unwrap();
        env.step([0.5, 0.5]).unwrap();
        assert!(env.distractor().particles.is_empty());
        assert_eq!(env.distractor().shake, 0.0);
        assert_eq!(env.distractor().gain, 0.0);
    }

    #[test]
    fn pools_are_disjoint() {
        let d = DifficultyConfig::default();
        let train = d.pool_seeds(Pool::Train);
        for s in d.pool_seeds(Pool::Eval) {
            assert!(!train.contains(&s));
            assert_eq!(d.pool_of(s), Some(Pool::Eval));
        }
    }

    #[test]
    fn distinct_actions_diverge_within_five_steps() {
        let d = DifficultyConfig::default();
        let mut a = Env::reset(8, 0, &d).unwrap();
        let mut b = Env::reset(8, 0, &d).unwrap();
        let mut diverged = false;
        for _ in 0..5 {
            a.step([1.0, 0.0]).unwrap();
            b.step([-1.0, 0.0]).unwrap();
            diverged |= a.endo().pos != b.endo().pos;
        }
        assert!(diverged);
    }

    proptest! {
        #[test]
        fn exogeneity(env_seed in 0u64..1000, p1 in 0u64..60, p2 in 0u64..80,
                      actions in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..30)) {
            let d = DifficultyConfig::default();
            let mut a = Env::reset(env_seed, p1, &d).unwrap();
            let mut b = Env::reset(env_seed, p2, &d).unwrap();
            prop_assert_eq!(a.endo(), b.endo());
            for (x, y) in actions {
                let ra = a.step([x, y]).unwrap();
                let rb = b.step([x, y]).unwrap();
                prop_assert_eq!(a.endo(), b.endo());
                prop_assert_eq!(ra, rb);
                prop_assert!((0.0..=1.0).contains(&ra));
                prop_assert!(a.endo().vel.iter().all(|v| v.abs() <= V_MAX));
                prop_assert!(a.endo().pos.iter().all(|v| v.abs() <= 1.0));
            }
        }

        #[test]
        fn distractor_scalars_stay_in_envelope(seed in 0u64..200, steps in 1usize..200) {
            let d = DifficultyConfig { shake_scale: 0.3, gain_scale: 0.2, ..DifficultyConfig::default() };
            let mut env = Env::reset(seed, seed % 60, &d).unwrap();
            for _ in 0..steps {
                env.step([0.0, 0.0]).unwrap();
                prop_assert!(env.distractor().shake.abs() <= 6.0 * 0.3);
                prop_assert!(env.distractor().gain.abs() <= 6.0 * 0.2);
            }
        }
    }
}
