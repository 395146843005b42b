mod common;

use common::{lam_fd_error, width4};
use latentlab::lam::{LamConfig, SupGradFlow, TargetMode};

fn ema(cfg: LamConfig) -> LamConfig {
    LamConfig { target_mode: Some(TargetMode::Ema), ..width4(cfg) }
}

#[test]
fn full_laom_loss_with_supervision() {
    let cfg = LamConfig { labeled_loss_coef: 0.5, ..ema(LamConfig::laom_sup()) };
    let err = lam_fd_error(&cfg, 0, 1e-6);
    eprintln!("full LAOM loss: max relative error {err:.3e}");
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn laom_without_supervision() {
    assert!(lam_fd_error(&ema(LamConfig::laom()), 1, 1e-6) <= 1e-4);
}

#[test]
fn head_only_supervision_reaches_only_the_head() {
    use latentlab::graphgrad::Tensor;
    use latentlab::lam::{LabeledBatch, LamModel};
    let m = |v: f64| Tensor::matrix(2, 6, (0..12).map(|i| (i as f64 * v).sin()).collect()).unwrap();
    let lb = LabeledBatch { obs_t: m(0.7), obs_tk: m(1.3), actions: Tensor::matrix(2, 2, vec![0.5, -0.2, 0.1, 0.9]).unwrap() };
    let grads = |coef: f64| {
        let cfg = LamConfig { sup_grad_flow: SupGradFlow::HeadOnly, labeled_loss_coef: coef, ..ema(LamConfig::laom_sup()) };
        let model = LamModel::new(&cfg, 6, 2).unwrap();
        model.loss_and_gradients(&m(0.3), &m(0.9), Some(&lb)).unwrap().1
    };
    let (with, without) = (grads(0.5), grads(0.0));
    let mut head_moved = false;
    for (name, g) in with.iter() {
        if name.starts_with("sup") {
            head_moved |= g.data().iter().any(|&v| v != 0.0);
        } else {
            assert_eq!(Some(g), without.get(name), "{name}");
        }
    }
    assert!(head_moved);
}

#[test]
fn lapo_reconstruction_without_quantizer() {
    let cfg = LamConfig { use_fsq: false, ..width4(LamConfig::lapo()) };
    assert!(lam_fd_error(&cfg, 3, 1e-6) <= 1e-4);
}

#[test]
fn zero_block_networks_reduce_to_affine_maps() {
    let cfg = LamConfig { n_blocks: 0, ..ema(LamConfig::laom_sup()) };
    assert!(lam_fd_error(&cfg, 4, 1e-6) <= 1e-4);
    let cfg = LamConfig { n_blocks: 0, use_fsq: false, ..width4(LamConfig::lapo()) };
    assert!(lam_fd_error(&cfg, 5, 1e-6) <= 1e-4);
}
