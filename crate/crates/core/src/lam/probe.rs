use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphgrad::{Graph, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    ActionFromZ,
    ActionFromH,
    DistractorFromH,
}

/// Linear read-out trained on detached features with its own Adam state.
#[derive(Debug, Clone)]
pub struct Probe {
    kind: ProbeKind,
    store: ParamStore,
    din: usize,
    dout: usize,
    sum: f64,
    count: usize,
}

impl Probe {
    /// Zero-initialized, so probes carry no randomness.
    pub fn new(kind: ProbeKind, din: usize, dout: usize) -> Self {
        let mut store = ParamStore::new();
        store.insert("probe.w", Tensor::zeros(&[din, dout])).expect("fresh store");
        store.insert("probe.b", Tensor::zeros(&[dout])).expect("fresh store");
        Self { kind, store, din, dout, sum: 0.0, count: 0 }
    }

    pub fn kind(&self) -> ProbeKind {
        self.kind
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check(&self, input: &Tensor, target: &Tensor) -> Result<()> {
        if input.rank() != 2 || input.cols() != self.din || target.rank() != 2
            || target.cols() != self.dout || target.rows() != input.rows()
        {
            return Err(Error::shape(
                "probe",
                format!("{:?} probe {}→{}: input {:?}, target {:?}", self.kind, self.din, self.dout, input.shape(), target.shape()),
            ));
        }
        Ok(())
    }

    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(input.clone())?;
        let w = g.frozen(&self.store, "probe.w")?;
        let b = g.frozen(&self.store, "probe.b")?;
        let y = g.affine(x, w, b)?;
        Ok(g.value(y).clone())
    }

    pub fn mse(&self, input: &Tensor, target: &Tensor) -> Result<f64> {
        self.check(input, target)?;
        let p = self.predict(input)?;
        Ok(mean_sq_diff(&p, target))
    }

    /// One Adam step on the probe. Returns the batch MSE before the step and
    /// adds it to the running epoch mean.
    pub fn step(&mut self, input: &Tensor, target: &Tensor, lr: f64) -> Result<f64> {
        self.check(input, target)?;
        let mut g = Graph::new();
        let x = g.constant(input.clone())?;
        let w = g.param(&self.store, "probe.w")?;
        let b = g.param(&self.store, "probe.b")?;
        let y = g.affine(x, w, b)?;
        let t = g.constant(target.clone())?;
        let loss = g.mse(y, t)?;
        let grads = g.backward(loss)?;
        self.store.adam_step(&grads, lr)?;
        let v = g.value(loss).item();
        self.sum += v;
        self.count += 1;
        Ok(v)
    }

    /// Mean of the step MSEs since the last call; resets the accumulator.
    pub fn take_epoch_mse(&mut self) -> Option<f64> {
        let out = (self.count > 0).then(|| self.sum / self.count as f64);
        self.sum = 0.0;
        self.count = 0;
        out
    }
}

pub(crate) fn mean_sq_diff(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len().max(1) as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Average per-column variance: the MSE of predicting each column's mean.
pub fn target_variance(t: &Tensor) -> f64 {
    let (rows, cols) = (t.rows(), t.cols());
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for c in 0..cols {
        let mean = (0..rows).map(|r| t.row(r)[c]).sum::<f64>() / rows as f64;
        total += (0..rows).map(|r| (t.row(r)[c] - mean).powi(2)).sum::<f64>() / rows as f64;
    }
    total / cols as f64
}
