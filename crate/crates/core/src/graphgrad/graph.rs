//! Tape-style compute graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order. Every op evaluates eagerly and checks its output for
//! NaN/Inf.

use std::collections::{BTreeMap, HashMap};

use super::fsq::FsqConfig;
use super::optim::ParamStore;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(String),
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu6(NodeId),
    Tanh(NodeId),
    Concat(Vec<NodeId>),
    StopGrad,
    Fsq(NodeId),
    Mse(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Affine { .. } => "affine",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu6(_) => "relu6",
            Op::Tanh(_) => "tanh",
            Op::Concat(_) => "concat",
            Op::StopGrad => "stop_grad",
            Op::Fsq(_) => "fsq",
            Op::Mse(..) => "mse",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of a scalar output with respect to every parameter node,
/// keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.grads.insert(name.into(), grad);
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn relu6(v: f64) -> f64 {
    v.clamp(0.0, 6.0)
}

/// Round half away from zero (`f64::round` semantics, pinned here on purpose).
pub(crate) fn round_half_away(v: f64) -> f64 {
    v.round()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite { node: id, op: op.name() });
        }
        self.nodes.push(Node { op, value, requires_grad });
        Ok(NodeId(id))
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Input data; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Constant, value, false)
    }

    /// A trainable leaf bound to `store[name]`. Repeated requests for the same
    /// name within one graph return the same node so gradients accumulate.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store.get(name)?.clone();
        let id = self.push(Op::Param(name.to_string()), value, true)?;
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// A parameter read as a constant (frozen network, target encoder).
    pub fn frozen(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let value = store.get(name)?.clone();
        self.constant(value)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.rank() != 2 || xv.rank() > 2 || xv.rank() == 0 {
            return Err(Error::shape("affine", format!("x {:?}, W {:?}", xv.shape(), wv.shape())));
        }
        let (din, dout) = (wv.shape()[0], wv.shape()[1]);
        if xv.cols() != din || bv.shape() != [dout] {
            return Err(Error::shape(
                "affine",
                format!("x {:?}, W {:?}, b {:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * dout);
        for _ in 0..rows {
            out.extend_from_slice(bv.data());
        }
        gemm(rows, din, dout, xv.data(), false, wv.data(), false, &mut out, true);
        let shape = if xv.rank() == 1 { vec![dout] } else { vec![rows, dout] };
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Op::Affine { x, w, b }, Tensor::new(shape, out)?, rg)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op.name(), av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(op, value, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let value = self.value(a).map(|v| v * factor);
        let rg = self.rg(a);
        self.push(Op::Scale(a, factor), value, rg)
    }

    pub fn relu6(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(relu6);
        let rg = self.rg(a);
        self.push(Op::Relu6(a), value, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(Op::Tanh(a), value, rg)
    }

    /// Concatenation along the feature (last) axis.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let first = self.value(xs[0]);
        let rank = first.rank();
        let rows = first.rows();
        if rank == 0 || rank > 2 {
            return Err(Error::shape("concat", format!("rank {rank}")));
        }
        let mut total = 0;
        for &x in xs {
            let v = self.value(x);
            if v.rank() != rank || v.rows() != rows {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", first.shape(), v.shape()),
                ));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(r));
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(Op::Concat(xs.to_vec()), Tensor::new(shape, data)?, rg)
    }

    /// Identity on the forward pass; blocks all adjoint flow to `a`.
    pub fn stop_grad(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).clone();
        self.push(Op::StopGrad, value, false)
    }

    /// Finite scalar quantization with a straight-through rounding gradient.
    pub fn fsq(&mut self, z: NodeId, cfg: &FsqConfig) -> Result<NodeId> {
        let zv = self.value(z);
        if zv.cols() != cfg.levels().len() {
            return Err(Error::shape(
                "fsq",
                format!("latent dim {} vs {} levels", zv.cols(), cfg.levels().len()),
            ));
        }
        let half: Vec<f64> = cfg.levels().iter().map(|&l| (l as f64 - 1.0) / 2.0).collect();
        let cols = zv.cols();
        let data = zv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let h = half[i % cols];
                round_half_away(h * v.tanh()) / h
            })
            .collect();
        let value = Tensor::new(zv.shape().to_vec(), data)?;
        let rg = self.rg(z);
        self.push(Op::Fsq(z), value, rg)
    }

    /// Mean squared error over all elements; a scalar node.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (p, t) = (self.value(pred), self.value(target));
        same_shape("mse", p, t)?;
        let n = p.len().max(1) as f64;
        let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let rg = self.rg(pred) || self.rg(target);
        self.push(Op::Mse(pred, target), Tensor::scalar(s / n), rg)
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 || out.rank() > 1 {
            return Err(Error::NonScalar(out.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(vec![1.0]);
        let mut result = Gradients::default();

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { node: i, op: node.op.name() });
            }
            match &node.op {
                Op::Constant | Op::StopGrad => {}
                Op::Param(name) => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    result.insert(name.clone(), t);
                }
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                    let rows = xv.rows();
                    if self.rg(*x) {
                        let mut dx = vec![0.0; rows * din];
                        gemm(rows, dout, din, &g, false, wv.data(), true, &mut dx, false);
                        accumulate(&mut adj, *x, dx);
                    }
                    if self.rg(*w) {
                        let mut dw = vec![0.0; din * dout];
                        gemm(din, rows, dout, xv.data(), true, &g, false, &mut dw, false);
                        accumulate(&mut adj, *w, dw);
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; dout];
                        for r in 0..rows {
                            for (d, v) in db.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                                *d += v;
                            }
                        }
                        accumulate(&mut adj, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut adj, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut adj, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut adj, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut adj, *b, g.iter().map(|v| -v).collect());
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if self.rg(*a) {
                        accumulate(&mut adj, *a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                    }
                    if self.rg(*b) {
                        accumulate(&mut adj, *b, g.iter().zip(av).map(|(g, x)| g * x).collect());
                    }
                }
                Op::Scale(a, f) => {
                    accumulate(&mut adj, *a, g.iter().map(|v| v * f).collect());
                }
                Op::Relu6(a) => {
                    let av = self.value(*a).data();
                    let d = g
                        .iter()
                        .zip(av)
                        .map(|(g, &x)| if x > 0.0 && x < 6.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *a, d);
                }
                Op::Tanh(a) => {
                    let yv = node.value.data();
                    let d = g.iter().zip(yv).map(|(g, y)| g * (1.0 - y * y)).collect();
                    accumulate(&mut adj, *a, d);
                }
                Op::Concat(xs) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &x in xs {
                        let c = self.value(x).cols();
                        if self.rg(x) {
                            let mut d = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                d.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                            }
                            accumulate(&mut adj, x, d);
                        }
                        offset += c;
                    }
                }
                Op::Fsq(z) => {
                    // Rounding is treated as identity, so the gradient is that
                    // of tanh(z) = g(z)/half.
                    let zv = self.value(*z).data();
                    let d = g
                        .iter()
                        .zip(zv)
                        .map(|(g, &x)| {
                            let t = x.tanh();
                            g * (1.0 - t * t)
                        })
                        .collect();
                    accumulate(&mut adj, *z, d);
                }
                Op::Mse(p, t) => {
                    let (pv, tv) = (self.value(*p).data(), self.value(*t).data());
                    let n = pv.len().max(1) as f64;
                    let scale = 2.0 * g[0] / n;
                    let diff: Vec<f64> = pv.iter().zip(tv).map(|(a, b)| scale * (a - b)).collect();
                    if self.rg(*t) {
                        accumulate(&mut adj, *t, diff.iter().map(|v| -v).collect());
                    }
                    if self.rg(*p) {
                        accumulate(&mut adj, *p, diff);
                    }
                }
            }
        }
        Ok(result)
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut adj[id.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, t).unwrap();
        s
    }

    #[test]
    fn square_derivative() {
        let store = store_with("x", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("x").unwrap().item(), 6.0);
    }

    #[test]
    fn stop_grad_blocks_one_factor() {
        let store = store_with("x", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let sx = g.stop_grad(x).unwrap();
        let y = g.mul(sx, x).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("x").unwrap().item(), 3.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let store = store_with("x", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let y = g.tanh(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalar(_))));
    }

    #[test]
    fn mse_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        let b = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let m = g.mse(a, b).unwrap();
        assert_eq!(g.value(m).item(), 0.5);
        let c = g.constant(Tensor::vector(vec![-2.0])).unwrap();
        let d = g.constant(Tensor::vector(vec![1.0])).unwrap();
        let m2 = g.mse(c, d).unwrap();
        assert_eq!(g.value(m2).item(), 9.0);
        let same = g.mse(a, a).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let e = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(g.mse(a, e), Err(Error::Shape { .. })));
    }

    #[test]
    fn elementwise_ops() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![7.0, -1.0, 3.0])).unwrap();
        let r = g.relu6(x).unwrap();
        assert_eq!(g.value(r).data(), &[6.0, 0.0, 3.0]);
        let w = g.constant(Tensor::identity(3)).unwrap();
        let b = g.constant(Tensor::zeros(&[3])).unwrap();
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        let a = g.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let c = g.concat(&[a, x]).unwrap();
        assert_eq!(g.value(c).shape(), &[5]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 7.0, -1.0, 3.0]);
        let t = g.tanh(a).unwrap();
        assert_eq!(g.value(t).data()[0], 1.0_f64.tanh());
    }

    #[test]
    fn affine_rejects_bad_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let w = g.constant(Tensor::zeros(&[4, 2])).unwrap();
        let b = g.constant(Tensor::zeros(&[2])).unwrap();
        assert!(g.affine(x, w, b).is_err());
    }

    #[test]
    fn non_finite_is_reported_with_node() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1e308])).unwrap();
        let err = g.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { node: 1, op: "scale" }));
        assert!(g.constant(Tensor::vector(vec![f64::NAN])).is_err());
    }

    #[test]
    fn non_param_leaves_get_no_gradient() {
        let store = store_with("w", Tensor::scalar(2.0));
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let c = g.constant(Tensor::scalar(5.0)).unwrap();
        let y = g.mul(w, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads.get("w").unwrap().item(), 5.0);
    }
}
