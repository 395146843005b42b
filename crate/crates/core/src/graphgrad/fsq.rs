use serde::{Deserialize, Serialize};

use super::graph::round_half_away;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-dimension level counts for finite scalar quantization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct FsqConfig {
    levels: Vec<u32>,
}

impl FsqConfig {
    pub fn new(levels: Vec<u32>) -> Result<Self> {
        if let Some(bad) = levels.iter().find(|&&l| l < 3 || l % 2 == 0) {
            return Err(Error::Config(format!("FSQ levels must be odd and >= 3, got {bad}")));
        }
        Ok(Self { levels })
    }

    /// `dim` dimensions, each with `levels` levels.
    pub fn uniform(dim: usize, levels: u32) -> Result<Self> {
        Self::new(vec![levels; dim])
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn dim(&self) -> usize {
        self.levels.len()
    }

    /// Forward-only quantization of a `[.., dim]` tensor.
    pub fn quantize(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.dim() {
            return Err(Error::shape("fsq", format!("{} vs {}", z.cols(), self.dim())));
        }
        let cols = z.cols();
        Ok(z.map_indexed(|i, v| {
            let half = (self.levels[i % cols] as f64 - 1.0) / 2.0;
            round_half_away(half * v.tanh()) / half
        }))
    }

    /// Whether `value` lies on the grid of dimension `dim`.
    pub fn on_grid(&self, dim: usize, value: f64) -> bool {
        let half = (self.levels[dim] as f64 - 1.0) / 2.0;
        let scaled = value * half;
        (scaled - scaled.round()).abs() < 1e-9 && value.abs() <= 1.0 + 1e-12
    }
}

impl TryFrom<Vec<u32>> for FsqConfig {
    type Error = Error;
    fn try_from(v: Vec<u32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<FsqConfig> for Vec<u32> {
    fn from(c: FsqConfig) -> Self {
        c.levels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphgrad::{Graph, ParamStore};
    use proptest::prelude::*;

    #[test]
    fn rejects_even_or_small_levels() {
        assert!(FsqConfig::new(vec![4]).is_err());
        assert!(FsqConfig::new(vec![1]).is_err());
        assert!(FsqConfig::new(vec![3, 5, 7]).is_ok());
    }

    #[test]
    fn hand_values() {
        let c = FsqConfig::new(vec![3, 5, 5]).unwrap();
        let q = c.quantize(&Tensor::vector(vec![0.2, 0.0, 50.0])).unwrap();
        // tanh(0.2) = 0.1974 rounds to 0; z = 0 is 0; saturation maps to the grid max.
        assert_eq!(q.data(), &[0.0, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn output_on_grid_and_ste_matches_tanh_derivative(
            zs in proptest::collection::vec(-4.0f64..4.0, 1..6),
            level_idx in 0usize..4,
        ) {
            let level = [3u32, 5, 7, 9][level_idx];
            let cfg = FsqConfig::uniform(zs.len(), level).unwrap();
            let mut store = ParamStore::new();
            store.insert("z", Tensor::vector(zs.clone())).unwrap();
            let mut g = Graph::new();
            let z = g.param(&store, "z").unwrap();
            let q = g.fsq(z, &cfg).unwrap();
            for (d, &v) in g.value(q).data().iter().enumerate() {
                prop_assert!(cfg.on_grid(d, v));
            }
            // sum of outputs -> gradient per element is the STE derivative
            let ones = g.constant(Tensor::full(&[zs.len()], 1.0)).unwrap();
            let prod = g.mul(q, ones).unwrap();
            let zero = g.constant(Tensor::zeros(&[zs.len()])).unwrap();
            let loss = g.mse(prod, zero).unwrap();
            let grads = g.backward(loss).unwrap();
            let n = zs.len() as f64;
            for (i, &zi) in zs.iter().enumerate() {
                let qi = g.value(q).data()[i];
                let expected = 2.0 * qi / n * (1.0 - zi.tanh().powi(2));
                prop_assert!((grads.get("z").unwrap().data()[i] - expected).abs() < 1e-12);
            }
        }
    }
}
