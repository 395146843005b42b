use rand_distr::{Distribution, StandardNormal};

use super::env::EndoState;
use crate::rng::Rng;

pub const EXPERT_POS_GAIN: f64 = 1.0;
pub const EXPERT_VEL_GAIN: f64 = 0.8;
pub const EXPERT_NOISE: f64 = 0.1;

/// Scripted PD controller toward the goal with additive exploration noise.
pub fn expert_action(endo: &EndoState, noise: [f64; 2]) -> [f64; 2] {
    let mut a = [0.0; 2];
    for i in 0..2 {
        let raw = EXPERT_POS_GAIN * (endo.goal[i] - endo.pos[i]) - EXPERT_VEL_GAIN * endo.vel[i]
            + noise[i];
        a[i] = raw.clamp(-1.0, 1.0);
    }
    a
}

/// Expert action with Gaussian noise of standard deviation `sigma`.
pub fn noisy_expert_action(endo: &EndoState, sigma: f64, rng: &mut Rng) -> [f64; 2] {
    let mut n = [0.0; 2];
    if sigma > 0.0 {
        for v in &mut n {
            let g: f64 = StandardNormal.sample(rng);
            *v = sigma * g;
        }
    }
    expert_action(endo, n)
}
