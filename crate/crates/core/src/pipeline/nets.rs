use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphgrad::{Bind, Graph, Linear, ParamStore, ResMlp, Tensor};
use crate::rng::{self, tag};

/// Rows per forward pass when running a network over a whole dataset.
pub(crate) const INFER_CHUNK: usize = 2048;

/// A residual MLP with its own parameter store: latent policies, BC
/// policies and the like.
#[derive(Debug, Clone)]
pub struct MlpNet {
    net: ResMlp,
    store: ParamStore,
}

impl MlpNet {
    pub fn new(prefix: &str, din: usize, width: usize, dout: usize, n_blocks: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = ResMlp::init(&mut store, prefix, din, 0, width, dout, n_blocks, &mut rng::stream(seed, &[tag::INIT]))?;
        Ok(Self { net, store })
    }

    pub fn din(&self) -> usize {
        self.net.din()
    }

    pub fn dout(&self) -> usize {
        self.net.dout()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn digest(&self) -> String {
        self.store.digest()
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        chunked(x, self.dout(), |c| self.net.apply(&self.store, c, None))
    }

    /// One Adam step on `mse(net(x), y)`; returns the loss before the step.
    pub fn train_step(&mut self, x: &Tensor, y: &Tensor, lr: f64) -> Result<f64> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone())?;
        let out = self.net.forward(&mut g, &self.store, Bind::Train, xn, None)?;
        let t = g.constant(y.clone())?;
        let loss = g.mse(out, t)?;
        let grads = g.backward(loss)?;
        self.store.adam_step(&grads, lr)?;
        Ok(g.value(loss).item())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::graphgrad::save_params(&self.store, path)
    }

    /// Loads parameters saved from a network of the same architecture.
    pub fn load_into(&mut self, path: &std::path::Path) -> Result<()> {
        let loaded = crate::graphgrad::load_params(path)?;
        replace_params(&mut self.store, loaded)
    }
}

pub(crate) fn replace_params(dst: &mut ParamStore, src: ParamStore) -> Result<()> {
    let same = dst.len() == src.len()
        && dst.iter().zip(src.iter()).all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
    if !same {
        return Err(Error::Format("checkpoint does not match the configured architecture".into()));
    }
    *dst = src;
    Ok(())
}

/// Applies `f` to row chunks of `x` and stacks the results.
pub(crate) fn chunked(x: &Tensor, dout: usize, f: impl Fn(Tensor) -> Result<Tensor>) -> Result<Tensor> {
    if x.rows() <= INFER_CHUNK {
        return f(x.clone());
    }
    let cols = x.cols();
    let mut out = Vec::with_capacity(x.rows() * dout);
    for start in (0..x.rows()).step_by(INFER_CHUNK) {
        let end = (start + INFER_CHUNK).min(x.rows());
        let chunk = Tensor::matrix(end - start, cols, x.data()[start * cols..end * cols].to_vec())?;
        out.extend_from_slice(f(chunk)?.data());
    }
    Tensor::matrix(x.rows(), dout, out)
}

/// Two-layer MLP from latents to actions.
#[derive(Debug, Clone)]
pub struct Decoder {
    l1: Linear,
    l2: Linear,
    store: ParamStore,
}

impl Decoder {
    pub fn new(din: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[tag::INIT]);
        let l1 = Linear::init(&mut store, "dec.l1", din, hidden, 1.0, &mut r)?;
        let l2 = Linear::init(&mut store, "dec.l2", hidden, 2, 1.0, &mut r)?;
        Ok(Self { l1, l2, store })
    }

    pub fn din(&self) -> usize {
        self.l1.din
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn forward(&self, g: &mut Graph, how: Bind, x: crate::graphgrad::NodeId) -> Result<crate::graphgrad::NodeId> {
        let h = self.l1.forward(g, &self.store, how, x)?;
        let h = g.relu6(h)?;
        self.l2.forward(g, &self.store, how, h)
    }

    pub fn predict(&self, z: &Tensor) -> Result<Tensor> {
        chunked(z, 2, |c| {
            let mut g = Graph::new();
            let x = g.constant(c)?;
            let y = self.forward(&mut g, Bind::Frozen, x)?;
            Ok(g.value(y).clone())
        })
    }

    pub fn train_step(&mut self, z: &Tensor, a: &Tensor, lr: f64) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(z.clone())?;
        let y = self.forward(&mut g, Bind::Train, x)?;
        let t = g.constant(a.clone())?;
        let loss = g.mse(y, t)?;
        let grads = g.backward(loss)?;
        self.store.adam_step(&grads, lr)?;
        Ok(g.value(loss).item())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::graphgrad::save_params(&self.store, path)
    }

    pub fn load_into(&mut self, path: &std::path::Path) -> Result<()> {
        replace_params(&mut self.store, crate::graphgrad::load_params(path)?)
    }
}

/// Architecture of a supervised inverse dynamics model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdmShape {
    pub obs_dim: usize,
    pub repr_dim: usize,
    pub width: usize,
    pub n_blocks: usize,
    pub max_offset: usize,
}

/// Encoder plus head regressing a_t from (o_t, o_{t+k}); the same
/// capacity class as the LAOM encoder and IDM.
#[derive(Debug, Clone)]
pub struct SupervisedIdm {
    shape: IdmShape,
    enc: ResMlp,
    head: ResMlp,
    store: ParamStore,
}

impl SupervisedIdm {
    pub fn new(shape: IdmShape, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let dh = shape.repr_dim;
        let enc = ResMlp::init(&mut store, "enc", shape.obs_dim, 0, shape.width, dh, shape.n_blocks, &mut rng::stream(seed, &[tag::INIT, 1]))?;
        let head = ResMlp::init(&mut store, "head", 2 * dh, 2 * dh, shape.width, 2, shape.n_blocks, &mut rng::stream(seed, &[tag::INIT, 2]))?;
        Ok(Self { shape, enc, head, store })
    }

    pub fn shape(&self) -> IdmShape {
        self.shape
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn forward(&self, g: &mut Graph, how: Bind, o_t: Tensor, o_tk: Tensor) -> Result<crate::graphgrad::NodeId> {
        let xt = g.constant(o_t)?;
        let xk = g.constant(o_tk)?;
        let ht = self.enc.forward(g, &self.store, how, xt, None)?;
        let hk = self.enc.forward(g, &self.store, how, xk, None)?;
        let pair = g.concat(&[ht, hk])?;
        self.head.forward(g, &self.store, how, pair, Some(pair))
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        chunked(x, self.shape.repr_dim, |c| self.enc.apply(&self.store, c, None))
    }

    pub fn predict(&self, o_t: &Tensor, o_tk: &Tensor) -> Result<Tensor> {
        if o_t.shape() != o_tk.shape() {
            return Err(Error::shape("idm", format!("{:?} vs {:?}", o_t.shape(), o_tk.shape())));
        }
        let cols = o_t.cols();
        let mut out = Vec::with_capacity(o_t.rows() * 2);
        for start in (0..o_t.rows()).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(o_t.rows());
            let a = Tensor::matrix(end - start, cols, o_t.data()[start * cols..end * cols].to_vec())?;
            let b = Tensor::matrix(end - start, cols, o_tk.data()[start * cols..end * cols].to_vec())?;
            let mut g = Graph::new();
            let y = self.forward(&mut g, Bind::Frozen, a, b)?;
            out.extend_from_slice(g.value(y).data());
        }
        Tensor::matrix(o_t.rows(), 2, out)
    }

    pub fn train_step(&mut self, o_t: &Tensor, o_tk: &Tensor, a: &Tensor, lr: f64) -> Result<f64> {
        let mut g = Graph::new();
        let y = self.forward(&mut g, Bind::Train, o_t.clone(), o_tk.clone())?;
        let t = g.constant(a.clone())?;
        let loss = g.mse(y, t)?;
        let grads = g.backward(loss)?;
        self.store.adam_step(&grads, lr)?;
        Ok(g.value(loss).item())
    }
}
