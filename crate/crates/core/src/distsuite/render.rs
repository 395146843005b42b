use serde::{Deserialize, Serialize};

use super::env::{DistractorState, EndoState};
use crate::graphgrad::Tensor;
use crate::rng::{self, tag};

pub const VECTOR_DIM: usize = 32;
pub const GRID_SIDE: usize = 16;
const BLOB_SIGMA: f64 = 1.0;
const SHAKE_PIXELS: f64 = 4.0;
/// Typical spread of each endogenous component (pos, vel, goal) under the
/// expert, and of particle position and velocity.
const ENDO_SPREAD: [f64; 6] = [0.5, 0.5, 0.1, 0.1, 0.5, 0.5];
const PARTICLE_SPREAD: [f64; 4] = [0.7, 0.7, 1.4, 1.4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ObsMode {
    #[default]
    Vector,
    Grid,
}

impl ObsMode {
    pub fn obs_dim(self) -> usize {
        match self {
            ObsMode::Vector => VECTOR_DIM,
            ObsMode::Grid => GRID_SIDE * GRID_SIDE,
        }
    }
}

/// Maps states to observations. The mixing matrix and shake direction are
/// fixed per experiment (mixing seed), never per trajectory.
#[derive(Debug, Clone)]
pub struct Renderer {
    mode: ObsMode,
    /// `[state_dim, VECTOR_DIM]`, so `obs = s · M`.
    mixing: Tensor,
    shake_dir: Vec<f64>,
}

impl Renderer {
    pub fn new(mode: ObsMode, mixing_seed: u64, n_particles: usize) -> Self {
        let mut r = rng::stream(mixing_seed, &[tag::MIXING]);
        let d_s = 6 + 4 * n_particles;
        // Each row is divided by its component's spread, then the endogenous
        // and distractor groups by their sizes, so particle_speed alone sets
        // the distractor strength.
        let mut m = Tensor::randn(&[d_s, VECTOR_DIM], 1.0, &mut r);
        let endo_scale = 1.0 / 6f64.sqrt();
        let dist_scale = if n_particles > 0 { 1.0 / ((4 * n_particles) as f64).sqrt() } else { 0.0 };
        for (i, v) in m.data_mut().iter_mut().enumerate() {
            let row = i / VECTOR_DIM;
            *v *= if row < 6 {
                endo_scale / ENDO_SPREAD[row]
            } else {
                dist_scale / PARTICLE_SPREAD[(row - 6) % 4]
            };
        }
        let u = Tensor::randn(&[VECTOR_DIM], 1.0, &mut r);
        let norm = u.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let shake_dir = u.data().iter().map(|v| v / norm).collect();
        Self { mode, mixing: m, shake_dir }
    }

    pub fn mode(&self) -> ObsMode {
        self.mode
    }

    pub fn obs_dim(&self) -> usize {
        self.mode.obs_dim()
    }

    pub fn render(&self, endo: &EndoState, dist: &DistractorState) -> Vec<f64> {
        match self.mode {
            ObsMode::Vector => self.render_vector(endo, dist),
            ObsMode::Grid => render_grid(endo, dist),
        }
    }

    fn render_vector(&self, endo: &EndoState, dist: &DistractorState) -> Vec<f64> {
        let mut s = endo.to_array().to_vec();
        for p in &dist.particles {
            s.extend_from_slice(&p.pos);
            s.extend_from_slice(&p.vel);
        }
        let gain_mult = 1.0 + dist.gain;
        let m = self.mixing.data();
        (0..VECTOR_DIM)
            .map(|j| {
                let pre: f64 = s.iter().enumerate().map(|(i, si)| si * m[i * VECTOR_DIM + j]).sum();
                gain_mult * pre.tanh() + dist.shake * self.shake_dir[j]
            })
            .collect()
    }
}

fn to_pixel(v: f64) -> f64 {
    (v + 1.0) / 2.0 * (GRID_SIDE - 1) as f64
}

fn add_blob(canvas: &mut [f64], pos: [f64; 2], amplitude: f64) {
    let (cx, cy) = (to_pixel(pos[0]), to_pixel(pos[1]));
    for y in 0..GRID_SIDE {
        for x in 0..GRID_SIDE {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            canvas[y * GRID_SIDE + x] += amplitude * (-d2 / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp();
        }
    }
}

/// Shifts a grid canvas by `(dx, dy)` pixels, zero-filling vacated cells.
pub fn shift_grid(canvas: &[f64], dx: i64, dy: i64) -> Vec<f64> {
    let n = GRID_SIDE as i64;
    let mut out = vec![0.0; canvas.len()];
    for y in 0..n {
        for x in 0..n {
            let (sx, sy) = (x - dx, y - dy);
            if (0..n).contains(&sx) && (0..n).contains(&sy) {
                out[(y * n + x) as usize] = canvas[(sy * n + sx) as usize];
            }
        }
    }
    out
}

fn render_grid(endo: &EndoState, dist: &DistractorState) -> Vec<f64> {
    let mut canvas = vec![0.0; GRID_SIDE * GRID_SIDE];
    add_blob(&mut canvas, endo.goal, 0.6);
    add_blob(&mut canvas, endo.pos, 1.0);
    for p in &dist.particles {
        add_blob(&mut canvas, p.pos, 0.8);
    }
    canvas.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let shift = (SHAKE_PIXELS * dist.shake).round() as i64;
    let gain_mult = 1.0 + dist.gain;
    shift_grid(&canvas, shift, 0)
        .into_iter()
        .map(|v| (v * gain_mult).clamp(0.0, 2.0))
        .collect()
}
