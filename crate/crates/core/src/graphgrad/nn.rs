//! Layer builders over the compute graph. Layers only hold parameter names;
//! values live in a [`ParamStore`], so the same layer can be evaluated
//! against an online store or a frozen target copy.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::optim::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng::Rng;

/// How parameters enter a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bind {
    /// Trainable leaves; gradients are reported.
    Train,
    /// Read as constants.
    Frozen,
}

fn bind(g: &mut Graph, store: &ParamStore, name: &str, how: Bind) -> Result<NodeId> {
    match how {
        Bind::Train => g.param(store, name),
        Bind::Frozen => g.frozen(store, name),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    /// Registers `prefix.w` / `prefix.b` with uniform(±1/√din) init scaled by `gain`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        din: usize,
        dout: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bound = gain / (din.max(1) as f64).sqrt();
        let weight = format!("{prefix}.w");
        let bias = format!("{prefix}.b");
        store.insert(&weight, Tensor::uniform(&[din, dout], bound, rng))?;
        store.insert(&bias, Tensor::uniform(&[dout], bound, rng))?;
        Ok(Self { weight, bias, din, dout })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, how: Bind, x: NodeId) -> Result<NodeId> {
        let w = bind(g, store, &self.weight, how)?;
        let b = bind(g, store, &self.bias, how)?;
        g.affine(x, w, b)
    }
}

/// Residual MLP: input projection, `n` blocks of
/// `x ← x + affine₂(relu6(affine₁(concat(x, cond))))`, output projection.
/// With zero blocks it is a composition of two affine maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResMlp {
    pub input: Linear,
    pub blocks: Vec<(Linear, Linear)>,
    pub output: Linear,
    pub cond_dim: usize,
}

impl ResMlp {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        din: usize,
        cond_dim: usize,
        width: usize,
        dout: usize,
        n_blocks: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let input = Linear::init(store, &format!("{prefix}.in"), din, width, 1.0, rng)?;
        let mut blocks = Vec::with_capacity(n_blocks);
        for i in 0..n_blocks {
            let a = Linear::init(store, &format!("{prefix}.b{i}.l1"), width + cond_dim, width, 1.0, rng)?;
            let b = Linear::init(store, &format!("{prefix}.b{i}.l2"), width, width, 0.5, rng)?;
            blocks.push((a, b));
        }
        let output = Linear::init(store, &format!("{prefix}.out"), width, dout, 1.0, rng)?;
        Ok(Self { input, blocks, output, cond_dim })
    }

    pub fn din(&self) -> usize {
        self.input.din
    }

    pub fn dout(&self) -> usize {
        self.output.dout
    }

    /// `cond` is re-injected into every block; it must be given iff the
    /// network was built with a nonzero `cond_dim`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        how: Bind,
        x: NodeId,
        cond: Option<NodeId>,
    ) -> Result<NodeId> {
        let mut h = self.input.forward(g, store, how, x)?;
        for (l1, l2) in &self.blocks {
            let u = match cond {
                Some(c) if self.cond_dim > 0 => g.concat(&[h, c])?,
                _ => h,
            };
            let a = l1.forward(g, store, how, u)?;
            let a = g.relu6(a)?;
            let d = l2.forward(g, store, how, a)?;
            h = g.add(h, d)?;
        }
        self.output.forward(g, store, how, h)
    }

    /// Forward pass on plain data without keeping gradients.
    pub fn apply(&self, store: &ParamStore, x: Tensor, cond: Option<Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let xn = g.constant(x)?;
        let cn = cond.map(|c| g.constant(c)).transpose()?;
        let out = self.forward(&mut g, store, Bind::Frozen, xn, cn)?;
        Ok(g.value(out).clone())
    }
}
