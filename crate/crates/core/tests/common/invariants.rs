//! Protocol invariants as reusable property checks. The `invariants` test
//! target runs them through `proptest!`; the acceptance target replays them
//! with a fixed runner.

use latentlab::distsuite::{collect_dataset, CollectConfig, Dataset, DifficultyConfig, Env, Pool};
use latentlab::lam::{sample_batch, sample_labeled_batch, LamConfig, LamModel, Probe, ProbeKind};
use latentlab::pipeline::{label_seed, relabel_latents, train_action_decoder, train_latent_bc, DecoderInput, DecoderStage, TrainStage};
use latentlab::rng;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

type Check = std::result::Result<(), TestCaseError>;

fn ok<T>(r: latentlab::Result<T>) -> std::result::Result<T, TestCaseError> {
    r.map_err(|e| TestCaseError::fail(e.to_string()))
}

pub fn tiny_dataset(n_traj: usize, horizon: usize, seed: u64, pool: Pool) -> Dataset {
    collect_dataset(&CollectConfig {
        n_traj,
        horizon,
        env_seed: seed,
        label_seed: seed,
        label_budget: 1,
        difficulty: DifficultyConfig { n_particles: 2, ..DifficultyConfig::default() },
        pool,
        ..CollectConfig::default()
    })
    .unwrap()
}

pub fn tiny_lam(supervision: bool) -> LamConfig {
    LamConfig {
        latent_action_dim: 4,
        repr_dim: 4,
        encoder_width: 8,
        idm_width: 8,
        fdm_width: 8,
        n_blocks: 1,
        future_obs_offset: 3,
        labeled_batch_size: 4,
        supervision,
        ..LamConfig::laom()
    }
}

fn tiny_stage() -> TrainStage {
    TrainStage { batch_size: 8, num_epochs: 1, updates_per_epoch: Some(3), hidden_dim: 8, num_res_blocks: 1, ..TrainStage::bc_default() }
}

/// Same reset and actions under two distractor pools give identical
/// endogenous trajectories.
pub fn exogeneity(env_seed: u64, pool_a: u64, pool_b: u64, actions: &[[f64; 2]]) -> Check {
    let d = DifficultyConfig::default();
    let mut a = ok(Env::reset(env_seed, pool_a, &d))?;
    let mut b = ok(Env::reset(env_seed, pool_b, &d))?;
    prop_assert_eq!(a.endo().to_array(), b.endo().to_array());
    for &u in actions {
        let ra = ok(a.step(u))?;
        let rb = ok(b.step(u))?;
        prop_assert_eq!(a.endo().to_array(), b.endo().to_array());
        prop_assert_eq!(ra, rb);
    }
    if pool_a != pool_b && d.n_particles > 0 {
        prop_assert_ne!(a.distractor().features(), b.distractor().features());
    }
    Ok(())
}

/// Train and eval pools never share a seed, and every trajectory collected
/// on a pool carries a seed from that pool only.
pub fn pool_disjointness(train: u64, eval: u64, seed: u64) -> Check {
    let d = DifficultyConfig { train_pool_size: train, eval_pool_size: eval, ..DifficultyConfig::default() };
    let tr = d.pool_seeds(Pool::Train);
    let ev = d.pool_seeds(Pool::Eval);
    prop_assert!(tr.end <= ev.start || ev.end <= tr.start);
    prop_assert_eq!(tr.end - tr.start, train);
    prop_assert_eq!(ev.end - ev.start, eval);
    for s in tr.clone() {
        prop_assert_eq!(d.pool_of(s), Some(Pool::Train));
    }
    let ds = collect_dataset(&CollectConfig {
        n_traj: 6,
        horizon: 2,
        env_seed: seed,
        difficulty: DifficultyConfig { n_particles: 1, ..d },
        pool: Pool::Eval,
        label_budget: 0,
        ..CollectConfig::default()
    });
    let ds = ok(ds)?;
    for t in ds.trajectories() {
        prop_assert!(ev.contains(&t.pool_seed()));
        prop_assert!(!tr.contains(&t.pool_seed()));
    }
    Ok(())
}

/// Every method reads the same nested labeled subset at a given seed, and
/// the training API exposes nothing outside it.
pub fn label_parity(ds: &Dataset, seed: u64, b1: usize, b2: usize, batch_seed: u64) -> Check {
    let (lo, hi) = (b1.min(b2), b1.max(b2));
    let ls = label_seed(ds.meta(), seed);
    let small = ok(ds.labeled_view(lo, ls))?;
    let again = ok(ds.labeled_view(lo, ls))?;
    let big = ok(ds.labeled_view(hi, ls))?;
    prop_assert_eq!(small.trajectories(), again.trajectories());
    prop_assert_eq!(small.budget(), lo);
    prop_assert!(small.trajectories().iter().all(|t| big.contains(*t)));
    for i in 0..ds.len() {
        prop_assert_eq!(small.actions(i).is_ok(), small.contains(i));
    }
    if lo > 0 {
        let mut r = rng::stream(batch_seed, &[]);
        let lb = ok(sample_labeled_batch(&small, 2, 16, &mut r))?;
        let diag = ds.diagnostics();
        // every labeled row's action must come from a labeled trajectory
        for row in 0..16 {
            let a = lb.actions.row(row);
            let found = small.trajectories().iter().any(|&i| {
                (0..ds.trajectories()[i].horizon()).any(|t| diag.action(i, t) == [a[0], a[1]])
            });
            prop_assert!(found);
        }
    } else {
        prop_assert!(small.trajectories().is_empty());
    }
    Ok(())
}

/// Probe training never touches the latent action model.
pub fn probe_isolation(ds: &Dataset, seed: u64, steps: usize, lr: f64) -> Check {
    let model = ok(LamModel::new(&tiny_lam(false), ds.meta().stacked_dim(), seed))?;
    let before = model.digest();
    let mut r = rng::stream(seed, &[1]);
    let mut pz = Probe::new(ProbeKind::ActionFromZ, 4, 2);
    let mut ph = Probe::new(ProbeKind::DistractorFromH, 4, ds.meta().distractor_dim());
    for _ in 0..steps {
        let b = ok(sample_batch(ds, 1, 8, &mut r))?;
        let z = ok(model.idm_infer(&b.obs_t, &b.obs_tk, 1))?;
        let h = ok(model.encode(&b.obs_t))?;
        ok(pz.step(&z, &b.actions, lr))?;
        ok(ph.step(&h, &b.distractor, lr))?;
    }
    prop_assert_eq!(before, model.digest());
    Ok(())
}

/// Stage 3 leaves the latent policy bit-identical.
pub fn freeze_contract(ds: &Dataset, seed: u64) -> Check {
    let stage = tiny_stage();
    let run = ok(latentlab::pipeline::train_lam(&tiny_lam(false), &stage, 1e-3, ds, None, seed))?;
    let lat = ok(relabel_latents(&run.model, ds, 1))?;
    let (policy, _) = ok(train_latent_bc(ds, &lat, &stage, seed))?;
    let frozen = policy.digest();
    let view = ok(ds.labeled_view(2, seed))?;
    let dec = DecoderStage { total_updates: 5, batch_size: 8, hidden_dim: 4, ..DecoderStage::default() };
    ok(train_action_decoder(&policy, None, &view, &DecoderStage { input: DecoderInput::Policy, ..dec.clone() }, seed))?;
    ok(train_action_decoder(&policy, Some(&lat), &view, &DecoderStage { input: DecoderInput::Lam, ..dec }, seed))?;
    prop_assert_eq!(frozen, policy.digest());
    Ok(())
}

pub fn actions_strategy(len: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec(prop::array::uniform2(-1.0f64..1.0), 1..len)
}

fn runner(cfg: Config) -> TestRunner {
    TestRunner::new_with_rng(cfg, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

/// Runs every invariant through a fixed-seed runner. Returns one result per
/// suite.
pub fn run_all(cases: u32) -> Vec<(&'static str, std::result::Result<(), String>)> {
    let cfg = || Config { cases, failure_persistence: None, ..Config::default() };
    let ds = tiny_dataset(8, 12, 0, Pool::Train);
    let mut out = Vec::new();

    let mut r = runner(cfg());
    let res = r.run(&(any::<u64>(), 0u64..60, 60u64..80, actions_strategy(40)), |(s, a, b, acts)| exogeneity(s, a, b, &acts));
    out.push(("exogeneity", res.map_err(|e| e.to_string())));

    let mut r = runner(cfg());
    let res = r.run(&(1u64..80, 1u64..40, any::<u64>()), |(t, e, s)| pool_disjointness(t, e, s));
    out.push(("pool-disjointness", res.map_err(|e| e.to_string())));

    let mut r = runner(cfg());
    let res = r.run(&(any::<u64>(), 0usize..=8, 0usize..=8, any::<u64>()), |(s, b1, b2, bs)| label_parity(&ds, s, b1, b2, bs));
    out.push(("label-parity", res.map_err(|e| e.to_string())));

    let mut r = runner(cfg());
    let res = r.run(&(any::<u64>(), 1usize..20, 1e-4f64..1.0), |(s, n, lr)| probe_isolation(&ds, s, n, lr));
    out.push(("probe-isolation", res.map_err(|e| e.to_string())));

    let mut r = runner(Config { cases: cases.min(8), failure_persistence: None, ..Config::default() });
    let res = r.run(&any::<u64>(), |s| freeze_contract(&ds, s));
    out.push(("freeze-contract", res.map_err(|e| e.to_string())));
    out
}
