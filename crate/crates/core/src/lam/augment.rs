use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::config::AugmentationConfig;
use crate::distsuite::{shift_grid, ObsMode, GRID_SIDE};
use crate::graphgrad::Tensor;
use crate::rng::Rng;

/// Augments a batch of stacked observations, one draw per row. Grid rows
/// shift every frame of a stack by the same offset.
pub fn augment(x: &Tensor, mode: ObsMode, cfg: &AugmentationConfig, rng: &mut Rng) -> Tensor {
    match mode {
        ObsMode::Vector => {
            if cfg.jitter_std == 0.0 {
                return x.clone();
            }
            let data = x
                .data()
                .iter()
                .map(|v| {
                    let g: f64 = StandardNormal.sample(rng);
                    v + cfg.jitter_std * g
                })
                .collect();
            Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
        }
        ObsMode::Grid => {
            if cfg.shift_radius == 0 {
                return x.clone();
            }
            let frame = GRID_SIDE * GRID_SIDE;
            let mut out = Vec::with_capacity(x.len());
            for r in 0..x.rows() {
                let dx = rng.random_range(-cfg.shift_radius..=cfg.shift_radius);
                let dy = rng.random_range(-cfg.shift_radius..=cfg.shift_radius);
                for f in x.row(r).chunks(frame) {
                    out.extend(shift_grid(f, dx, dy));
                }
            }
            Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
        }
    }
}

/// Augments both views of a pair. With `independent_views` off, both views
/// reuse the same draws.
pub fn augment_pair(
    o_t: &Tensor,
    o_tk: &Tensor,
    mode: ObsMode,
    cfg: &AugmentationConfig,
    rng: &mut Rng,
) -> (Tensor, Tensor) {
    if cfg.independent_views {
        let a = augment(o_t, mode, cfg, rng);
        let b = augment(o_tk, mode, cfg, rng);
        (a, b)
    } else {
        let mut twin = rng.clone();
        let a = augment(o_t, mode, cfg, rng);
        let b = augment(o_tk, mode, cfg, &mut twin);
        (a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn null_augmentation_is_identity() {
        let cfg = AugmentationConfig { jitter_std: 0.0, shift_radius: 0, independent_views: true };
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut r = rng::stream(0, &[]);
        assert_eq!(augment(&x, ObsMode::Vector, &cfg, &mut r), x);
        let g = Tensor::matrix(1, 256, (0..256).map(f64::from).collect()).unwrap();
        assert_eq!(augment(&g, ObsMode::Grid, &cfg, &mut r), g);
    }

    #[test]
    fn grid_shift_moves_single_pixel() {
        let mut canvas = vec![0.0; 256];
        canvas[5 * 16 + 14] = 1.0;
        canvas[3 * 16 + 4] = 1.0;
        let s = shift_grid(&canvas, 2, 0);
        assert_eq!(s[3 * 16 + 6], 1.0);
        assert_eq!(s.iter().sum::<f64>(), 1.0); // the pixel at column 14 left the canvas
        assert!((0..16).all(|y| s[y * 16] == 0.0 && s[y * 16 + 1] == 0.0));
    }

    #[test]
    fn same_rng_state_same_output() {
        let cfg = AugmentationConfig::default();
        let x = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let a = augment(&x, ObsMode::Vector, &cfg, &mut rng::stream(4, &[]));
        let b = augment(&x, ObsMode::Vector, &cfg, &mut rng::stream(4, &[]));
        assert_eq!(a, b);
        assert_ne!(a, x);
        let (p, q) = augment_pair(&x, &x, ObsMode::Vector, &AugmentationConfig { independent_views: false, ..cfg.clone() }, &mut rng::stream(4, &[]));
        assert_eq!(p, q);
        let (p, q) = augment_pair(&x, &x, ObsMode::Vector, &cfg, &mut rng::stream(4, &[]));
        assert_ne!(p, q);
    }
}
