//! Test-only oracles, independent of the training code paths they check.
#![allow(dead_code)]

pub mod invariants;

use latentlab::graphgrad::{Graph, NodeId, ParamStore, Tensor};
use latentlab::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Magnitude floor for relative errors; below it the comparison is absolute.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Central finite differences of `f` with respect to every value in `store`.
/// Returns the maximum relative error against `analytic`.
pub fn max_fd_error(
    store: &ParamStore,
    h: f64,
    analytic: &latentlab::graphgrad::Gradients,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let base = store.get(&name).unwrap().clone();
        for i in 0..base.len() {
            let mut plus = store.clone();
            let mut t = base.clone();
            t.data_mut()[i] += h;
            plus.set(&name, t).unwrap();
            let mut minus = store.clone();
            let mut t = base.clone();
            t.data_mut()[i] -= h;
            minus.set(&name, t).unwrap();
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let an = analytic.get(&name).map_or(0.0, |g| g.data()[i]);
            worst = worst.max(rel_err(an, fd));
        }
    }
    worst
}

#[derive(Debug, Clone)]
enum Instr {
    Affine { src: usize, w: String, b: String },
    Relu6(usize),
    Tanh(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Concat(usize, usize),
}

/// A random straight-line program over the differentiable ops, replayable
/// against any parameter store.
pub struct RandomGraph {
    pub store: ParamStore,
    input: Tensor,
    target: Tensor,
    program: Vec<Instr>,
    output: usize,
}

impl RandomGraph {
    pub fn generate(seed: u64, max_depth: usize, max_width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = rng.random_range(1..=3);
        let din = rng.random_range(1..=max_width);
        let mut store = ParamStore::new();
        let input = Tensor::new(
            vec![batch, din],
            (0..batch * din).map(|_| rng.random_range(-1.5..1.5)).collect(),
        )
        .unwrap();
        // widths[i] = feature width of value i; value 0 is the input
        let mut widths = vec![din];
        let mut program = Vec::new();
        let mut n_params = 0;
        let mut affine = |src: usize, dout: usize, widths: &mut Vec<usize>, program: &mut Vec<Instr>, store: &mut ParamStore, rng: &mut ChaCha8Rng| {
            let w = format!("w{n_params}");
            let b = format!("b{n_params}");
            n_params += 1;
            let dinp = widths[src];
            let bound = 1.0 / (dinp as f64).sqrt();
            let data = (0..dinp * dout).map(|_| rng.random_range(-bound..bound)).collect();
            store.insert(&w, Tensor::new(vec![dinp, dout], data).unwrap()).unwrap();
            store.insert(&b, Tensor::new(vec![dout], (0..dout).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap()).unwrap();
            program.push(Instr::Affine { src, w, b });
            widths.push(dout);
            widths.len() - 1
        };
        let mut cur = affine(0, rng.random_range(1..=max_width), &mut widths, &mut program, &mut store, &mut rng);
        let depth = rng.random_range(1..=max_depth);
        for _ in 0..depth {
            let choice = rng.random_range(0..7);
            cur = match choice {
                0 => {
                    program.push(Instr::Relu6(cur));
                    widths.push(widths[cur]);
                    widths.len() - 1
                }
                1 => {
                    program.push(Instr::Tanh(cur));
                    widths.push(widths[cur]);
                    widths.len() - 1
                }
                2..=4 => {
                    // a parallel branch of the same width, then a binary op
                    let w = widths[cur];
                    let other = affine(cur, w, &mut widths, &mut program, &mut store, &mut rng);
                    program.push(match choice {
                        2 => Instr::Add(cur, other),
                        3 => Instr::Sub(cur, other),
                        _ => Instr::Mul(cur, other),
                    });
                    widths.push(w);
                    widths.len() - 1
                }
                5 => {
                    let f = rng.random_range(-2.0..2.0);
                    program.push(Instr::Scale(cur, f));
                    widths.push(widths[cur]);
                    widths.len() - 1
                }
                _ => {
                    let other = affine(cur, rng.random_range(1..=max_width), &mut widths, &mut program, &mut store, &mut rng);
                    program.push(Instr::Concat(cur, other));
                    widths.push(widths[cur] + widths[other]);
                    widths.len() - 1
                }
            };
            cur = affine(cur, rng.random_range(1..=max_width), &mut widths, &mut program, &mut store, &mut rng);
        }
        let dout = widths[cur];
        let target = Tensor::new(
            vec![batch, dout],
            (0..batch * dout).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        Self { store, input, target, program, output: cur }
    }

    pub fn build(&self, store: &ParamStore) -> Result<(Graph, NodeId)> {
        let mut g = Graph::new();
        let mut vals = vec![g.constant(self.input.clone())?];
        for ins in &self.program {
            let id = match ins {
                Instr::Affine { src, w, b } => {
                    let wn = g.param(store, w)?;
                    let bn = g.param(store, b)?;
                    g.affine(vals[*src], wn, bn)?
                }
                Instr::Relu6(a) => g.relu6(vals[*a])?,
                Instr::Tanh(a) => g.tanh(vals[*a])?,
                Instr::Add(a, b) => g.add(vals[*a], vals[*b])?,
                Instr::Sub(a, b) => g.sub(vals[*a], vals[*b])?,
                Instr::Mul(a, b) => g.mul(vals[*a], vals[*b])?,
                Instr::Scale(a, f) => g.scale(vals[*a], *f)?,
                Instr::Concat(a, b) => g.concat(&[vals[*a], vals[*b]])?,
            };
            vals.push(id);
        }
        let t = g.constant(self.target.clone())?;
        let loss = g.mse(vals[self.output], t)?;
        Ok((g, loss))
    }

    pub fn loss(&self, store: &ParamStore) -> f64 {
        let (g, l) = self.build(store).unwrap();
        g.value(l).item()
    }

    /// Max relative error of backward against central differences.
    pub fn check(&self, h: f64) -> f64 {
        let (g, l) = self.build(&self.store).unwrap();
        let grads = g.backward(l).unwrap();
        max_fd_error(&self.store, h, &grads, |s| self.loss(s))
    }
}

/// Width-4 LAM whose full training loss (consistency or reconstruction,
/// plus supervision when enabled) is checked against central differences.
/// The target encoder is a separate EMA copy, so perturbing the online
/// parameters moves only the differentiated branch.
pub fn lam_fd_error(cfg: &latentlab::lam::LamConfig, seed: u64, h: f64) -> f64 {
    use latentlab::lam::{LabeledBatch, LamModel};
    let obs_dim = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mat = |rows: usize, cols: usize, s: f64| {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-s..s)).collect()).unwrap()
    };
    let (o_t, o_tk) = (mat(3, obs_dim, 1.0), mat(3, obs_dim, 1.0));
    let labeled = cfg.supervision.then(|| LabeledBatch { obs_t: mat(2, obs_dim, 1.0), obs_tk: mat(2, obs_dim, 1.0), actions: mat(2, 2, 1.0) });
    let mut model = LamModel::new(cfg, obs_dim, seed).unwrap();
    // move the online weights off the target copy so the consistency loss is not at its minimum
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    for n in &names {
        let mut t = model.params().get(n).unwrap().clone();
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        model.params_mut().set(n, t).unwrap();
    }
    let (_, grads) = model.loss_and_gradients(&o_t, &o_tk, labeled.as_ref()).unwrap();
    let base = model.clone();
    max_fd_error(model.params(), h, &grads, |s| {
        let mut m = base.clone();
        *m.params_mut() = s.clone();
        m.lam_loss(&o_t, &o_tk, labeled.as_ref()).unwrap().total
    })
}

pub fn width4(mut cfg: latentlab::lam::LamConfig) -> latentlab::lam::LamConfig {
    cfg.latent_action_dim = 4;
    cfg.repr_dim = 4;
    cfg.encoder_width = 4;
    cfg.idm_width = 4;
    cfg.fdm_width = 4;
    cfg.labeled_batch_size = 2;
    cfg
}
