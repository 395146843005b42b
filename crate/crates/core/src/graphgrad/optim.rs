use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    name: String,
    value: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named parameters plus their Adam moments and the optimizer step counter.
/// Insertion order is preserved and is the checkpoint order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    slots: Vec<Slot>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let shape = value.shape().to_vec();
        self.index.insert(name.to_string(), self.slots.len());
        self.slots.push(Slot {
            name: name.to_string(),
            value,
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.slots[i].value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self.index.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if self.slots[i].value.shape() != value.shape() {
            return Err(Error::shape("set", format!("{name}: {:?}", value.shape())));
        }
        self.slots[i].value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|s| (s.name.as_str(), &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn moments(&self, name: &str) -> Result<(&Tensor, &Tensor)> {
        self.index
            .get(name)
            .map(|&i| (&self.slots[i].m, &self.slots[i].v))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// A new store holding copies of every parameter whose name starts with
    /// `prefix`, with fresh moments.
    pub fn subset(&self, prefix: &str) -> Self {
        let mut out = Self::new();
        for s in self.slots.iter().filter(|s| s.name.starts_with(prefix)) {
            out.insert(&s.name, s.value.clone()).expect("names are unique");
        }
        out
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.slots {
            h.update(s.name.as_bytes());
            for d in s.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in s.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// One bias-corrected Adam step (β1=0.9, β2=0.999, ε=1e-8, no weight
    /// decay, no clipping). Parameters absent from `grads` see a zero gradient.
    pub fn adam_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            let i = *self.index.get(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if self.slots[i].value.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{name}: param {:?}, grad {:?}", self.slots[i].value.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { node: i, op: "adam_step" });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for slot in &mut self.slots {
            let g = grads.get(&slot.name).map(|g| g.data());
            let (p, m, v) = (slot.value.data_mut(), slot.m.data_mut(), slot.v.data_mut());
            for j in 0..p.len() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if total_steps == 0 || warmup_steps > total_steps {
            return Err(Error::Config(format!(
                "schedule needs 0 < total ({total_steps}) and warmup ({warmup_steps}) <= total"
            )));
        }
        Ok(Self { base_lr, warmup_steps, total_steps })
    }

    pub fn lr(&self, step: u64) -> Result<f64> {
        cosine_warmup_lr(step, self)
    }
}

pub fn cosine_warmup_lr(step: u64, s: &Schedule) -> Result<f64> {
    if step > s.total_steps {
        return Err(Error::OutOfRange(format!("step {step} > total {}", s.total_steps)));
    }
    if step < s.warmup_steps {
        return Ok(s.base_lr * step as f64 / s.warmup_steps as f64);
    }
    let decay = s.total_steps - s.warmup_steps;
    if decay == 0 {
        // Warmup spans the whole run; the ramp end wins.
        return Ok(s.base_lr);
    }
    let progress = (step - s.warmup_steps) as f64 / decay as f64;
    Ok(s.base_lr * 0.5 * (1.0 + (PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaConfig {
    pub tau: f64,
    pub update_every: u64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        // target_tau = 0.001, target_update_every = 1
        Self { tau: 0.001, update_every: 1 }
    }
}

impl EmaConfig {
    pub fn new(tau: f64, update_every: u64) -> Result<Self> {
        let cfg = Self { tau, update_every };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) || self.update_every == 0 {
            return Err(Error::Config(format!(
                "EMA needs 0 < tau <= 1 and update_every >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Whether an update is scheduled after optimizer step `step`.
    pub fn due(&self, step: u64) -> bool {
        step % self.update_every == 0
    }
}

/// `θ_tgt ← (1−τ)·θ_tgt + τ·θ_online` for every parameter of `target`.
pub fn ema_update(target: &mut ParamStore, online: &ParamStore, cfg: &EmaConfig) -> Result<()> {
    cfg.validate()?;
    for slot in &mut target.slots {
        let src = online.get(&slot.name)?;
        if src.shape() != slot.value.shape() {
            return Err(Error::shape("ema_update", slot.name.clone()));
        }
        if cfg.tau == 1.0 {
            slot.value = src.clone();
            continue;
        }
        for (t, &o) in slot.value.data_mut().iter_mut().zip(src.data()) {
            // t + τ(o − t): algebraically the convex blend, and exact at o == t.
            *t += cfg.tau * (o - *t);
        }
    }
    Ok(())
}
