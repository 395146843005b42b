use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::{DecoderInput, DecoderStage, IdmStage, TrainStage};
use super::nets::{Decoder, IdmShape, MlpNet, SupervisedIdm, INFER_CHUNK};
use crate::distsuite::{Dataset, LabeledView};
use crate::error::{Error, Result};
use crate::graphgrad::{Schedule, Tensor};
use crate::lam::{
    augment_pair, sample_batch, sample_labeled_batch, target_variance, LamConfig, LamModel, Probe,
    ProbeKind,
};
use crate::rng::{self, tag, Rng};

/// Per-epoch record of a LAM run. Probe values are the mean of the
/// concurrent probes' batch MSEs over the epoch, on separate one-step
/// batches; `nmse` divides by the dataset-wide target variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LamEpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub prediction: f64,
    pub supervision: Option<f64>,
    pub probe_mse_z: f64,
    pub probe_mse_h_action: f64,
    pub probe_mse_h_distractor: f64,
    pub probe_nmse_z: f64,
    pub probe_nmse_h_action: f64,
    pub probe_nmse_h_distractor: f64,
}

#[derive(Debug, Clone)]
pub struct LamRun {
    pub model: LamModel,
    pub metrics: Vec<LamEpochMetrics>,
}

impl LamRun {
    pub fn final_metrics(&self) -> Option<&LamEpochMetrics> {
        self.metrics.last()
    }
}

/// Target variances of actions and distractor features over every
/// transition of `ds`.
pub fn probe_target_variances(ds: &Dataset) -> Result<(f64, f64)> {
    let diag = ds.diagnostics();
    let dd = ds.meta().distractor_dim();
    let n = ds.n_transitions();
    let mut a = Vec::with_capacity(2 * n);
    let mut d = Vec::with_capacity(dd * n);
    for (i, tr) in ds.trajectories().iter().enumerate() {
        a.extend_from_slice(diag.actions(i));
        for t in 0..tr.horizon() {
            d.extend_from_slice(diag.distractor(i, t));
        }
    }
    let va = target_variance(&Tensor::matrix(n, 2, a)?);
    let vd = if dd > 0 { target_variance(&Tensor::matrix(n, dd, d)?) } else { 0.0 };
    Ok((va, vd))
}

fn ratio(x: f64, v: f64) -> f64 {
    if v > 0.0 {
        x / v
    } else {
        0.0
    }
}

/// Stage 1: trains the latent action model with concurrent probes.
/// `view` is required iff the config enables supervision.
pub fn train_lam(
    cfg: &LamConfig,
    stage: &TrainStage,
    probe_lr: f64,
    ds: &Dataset,
    view: Option<&LabeledView<'_>>,
    seed: u64,
) -> Result<LamRun> {
    stage.validate("lam stage")?;
    let view = match (cfg.supervision, view) {
        (true, Some(v)) if v.budget() > 0 => Some(v),
        (true, _) => return Err(Error::Config("supervision requested with label budget 0".into())),
        (false, _) => None,
    };
    let meta = ds.meta();
    let mut model = LamModel::new(cfg, meta.stacked_dim(), seed)?;
    let sched = stage.schedule(ds.n_transitions())?;
    let per_epoch = stage.updates_per_epoch(ds.n_transitions());
    let (var_a, var_d) = probe_target_variances(ds)?;
    let dd = meta.distractor_dim();
    let mut probe_z = Probe::new(ProbeKind::ActionFromZ, cfg.latent_action_dim, 2);
    let mut probe_ha = Probe::new(ProbeKind::ActionFromH, cfg.repr_dim, 2);
    let mut probe_hd = Probe::new(ProbeKind::DistractorFromH, cfg.repr_dim, dd.max(1));
    let mut batch_rng = rng::stream(seed, &[tag::BATCH]);
    let mut aug_rng = rng::stream(seed, &[tag::AUGMENT]);
    let mut lab_rng = rng::stream(seed, &[tag::LABELED_BATCH]);
    let mut probe_rng = rng::stream(seed, &[tag::PROBE]);
    let mut metrics = Vec::with_capacity(stage.num_epochs);
    for epoch in 0..stage.num_epochs {
        let (mut loss, mut pred, mut sup) = (0.0, 0.0, 0.0);
        let mut lr = 0.0;
        for u in 0..per_epoch {
            let step = (epoch * per_epoch + u + 1) as u64;
            lr = sched.lr(step)?;
            let batch = sample_batch(ds, cfg.future_obs_offset, stage.batch_size, &mut batch_rng)?;
            let (ot, ok) = if cfg.use_aug {
                augment_pair(&batch.obs_t, &batch.obs_tk, meta.mode, &cfg.augmentation, &mut aug_rng)
            } else {
                (batch.obs_t.clone(), batch.obs_tk.clone())
            };
            let labeled = match view {
                Some(v) => {
                    // a_t labels the one-step transition, the offset used for
                    // relabeling and for the held-out action MSE
                    let mut lb = sample_labeled_batch(v, 1, cfg.labeled_batch_size, &mut lab_rng)?;
                    if cfg.use_aug {
                        let (a, b) = augment_pair(&lb.obs_t, &lb.obs_tk, meta.mode, &cfg.augmentation, &mut lab_rng);
                        lb.obs_t = a;
                        lb.obs_tk = b;
                    }
                    Some(lb)
                }
                None => None,
            };
            let out = model.train_step(&ot, &ok, labeled.as_ref(), lr)?;
            loss += out.total;
            pred += out.prediction;
            sup += out.supervision.unwrap_or(0.0);
            // Probes read one-step latents, the ones relabeling produces.
            let pb = sample_batch(ds, 1, stage.batch_size, &mut probe_rng)?;
            let z = model.idm_infer(&pb.obs_t, &pb.obs_tk, 1)?;
            let h = model.encode(&pb.obs_t)?;
            probe_z.step(&z, &pb.actions, probe_lr)?;
            probe_ha.step(&h, &pb.actions, probe_lr)?;
            if dd > 0 {
                probe_hd.step(&h, &pb.distractor, probe_lr)?;
            }
        }
        let n = per_epoch as f64;
        let pz = probe_z.take_epoch_mse().unwrap_or(0.0);
        let pha = probe_ha.take_epoch_mse().unwrap_or(0.0);
        let phd = probe_hd.take_epoch_mse().unwrap_or(0.0);
        metrics.push(LamEpochMetrics {
            epoch,
            lr,
            loss: loss / n,
            prediction: pred / n,
            supervision: view.map(|_| sup / n),
            probe_mse_z: pz,
            probe_mse_h_action: pha,
            probe_mse_h_distractor: phd,
            probe_nmse_z: ratio(pz, var_a),
            probe_nmse_h_action: ratio(pha, var_a),
            probe_nmse_h_distractor: ratio(phd, var_d),
        });
    }
    Ok(LamRun { model, metrics })
}

/// Latent labels z_t = IDM(o_t, o_{t+k}) for t in 0..=H−k of every trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentLabels {
    pub k: usize,
    pub per_trajectory: Vec<Tensor>,
}

impl LatentLabels {
    pub fn len(&self) -> usize {
        self.per_trajectory.iter().map(Tensor::rows).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.per_trajectory.first().map_or(0, Tensor::cols)
    }
}

fn stacked_range(ds: &Dataset, traj: usize, ts: std::ops::Range<usize>) -> Result<Tensor> {
    let n = ts.len();
    let mut data = Vec::with_capacity(n * ds.meta().stacked_dim());
    for t in ts {
        ds.stacked_into(traj, t, &mut data);
    }
    Tensor::matrix(n, ds.meta().stacked_dim(), data)
}

/// Stage 2a: relabels every trajectory with latent actions, no augmentation.
pub fn relabel_latents(model: &LamModel, ds: &Dataset, k: usize) -> Result<LatentLabels> {
    if k < 1 || k > model.config().future_obs_offset {
        return Err(Error::OutOfRange(format!(
            "k_relabel {k} outside 1..={}",
            model.config().future_obs_offset
        )));
    }
    let per_trajectory = ds
        .trajectories()
        .iter()
        .enumerate()
        .map(|(i, tr)| {
            let n = (tr.horizon() + 1).saturating_sub(k);
            let mut rows = Vec::with_capacity(n * model.config().latent_action_dim);
            for start in (0..n).step_by(INFER_CHUNK) {
                let end = (start + INFER_CHUNK).min(n);
                let ot = stacked_range(ds, i, start..end)?;
                let ok = stacked_range(ds, i, start + k..end + k)?;
                rows.extend_from_slice(model.idm_infer(&ot, &ok, k)?.data());
            }
            Tensor::matrix(n, model.config().latent_action_dim, rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LatentLabels { k, per_trajectory })
}

/// Mean training loss per epoch of a regression run.
pub type LossCurve = Vec<f64>;

/// Generic epoch loop: `step(rng, lr)` performs one update and returns its loss.
fn run_epochs(
    stage: &TrainStage,
    n_samples: usize,
    rng: &mut Rng,
    mut step: impl FnMut(&mut Rng, f64) -> Result<f64>,
) -> Result<LossCurve> {
    stage.validate("stage")?;
    let sched = stage.schedule(n_samples)?;
    let per = stage.updates_per_epoch(n_samples);
    let mut curve = Vec::with_capacity(stage.num_epochs);
    for epoch in 0..stage.num_epochs {
        let mut sum = 0.0;
        for u in 0..per {
            let lr = sched.lr((epoch * per + u + 1) as u64)?;
            sum += step(rng, lr)?;
        }
        curve.push(sum / per as f64);
    }
    Ok(curve)
}

fn gather(ds: &Dataset, picks: &[(usize, usize)]) -> Result<Tensor> {
    let d = ds.meta().stacked_dim();
    let mut data = Vec::with_capacity(picks.len() * d);
    for &(i, t) in picks {
        ds.stacked_into(i, t, &mut data);
    }
    Tensor::matrix(picks.len(), d, data)
}

/// Stage 2b: behavior cloning of latent actions on the full dataset.
pub fn train_latent_bc(ds: &Dataset, latents: &LatentLabels, stage: &TrainStage, seed: u64) -> Result<(MlpNet, LossCurve)> {
    if latents.is_empty() || latents.per_trajectory.len() != ds.len() {
        return Err(Error::Config("latent BC needs latent labels for every trajectory".into()));
    }
    let dz = latents.dim();
    let mut policy = MlpNet::new("policy", ds.meta().stacked_dim(), stage.hidden_dim, dz, stage.num_res_blocks, seed)?;
    let index: Vec<(usize, usize)> = latents
        .per_trajectory
        .iter()
        .enumerate()
        .flat_map(|(i, z)| (0..z.rows()).map(move |t| (i, t)))
        .collect();
    let mut r = rng::stream(seed, &[tag::BATCH]);
    let curve = run_epochs(stage, index.len(), &mut r, |r, lr| {
        let picks: Vec<(usize, usize)> = (0..stage.batch_size).map(|_| index[r.random_range(0..index.len())]).collect();
        let x = gather(ds, &picks)?;
        let mut y = Vec::with_capacity(picks.len() * dz);
        for &(i, t) in &picks {
            y.extend_from_slice(latents.per_trajectory[i].row(t));
        }
        policy.train_step(&x, &Tensor::matrix(picks.len(), dz, y)?, lr)
    })?;
    Ok((policy, curve))
}

fn labeled_index(view: &LabeledView<'_>) -> Vec<(usize, usize)> {
    let ds = view.dataset();
    view.trajectories()
        .iter()
        .flat_map(|&i| (0..ds.trajectories()[i].horizon()).map(move |t| (i, t)))
        .collect()
}

fn labeled_actions(view: &LabeledView<'_>, picks: &[(usize, usize)]) -> Result<Tensor> {
    let mut a = Vec::with_capacity(picks.len() * 2);
    for &(i, t) in picks {
        a.extend_from_slice(&view.action(i, t)?);
    }
    Tensor::matrix(picks.len(), 2, a)
}

/// Stage 3: fits the latent-to-action decoder on labeled trajectories with
/// the policy frozen. Inputs are cached once, so the policy is only read.
pub fn train_action_decoder(
    policy: &MlpNet,
    latents: Option<&LatentLabels>,
    view: &LabeledView<'_>,
    stage: &DecoderStage,
    seed: u64,
) -> Result<(Decoder, LossCurve)> {
    if view.budget() == 0 {
        return Err(Error::Config("the action decoder needs a nonzero label budget".into()));
    }
    let ds = view.dataset();
    let index = labeled_index(view);
    let inputs = match stage.input {
        DecoderInput::Policy => policy.predict(&gather(ds, &index)?)?,
        DecoderInput::Lam => {
            let l = latents.ok_or_else(|| Error::Config("decoder input 'lam' needs latent labels".into()))?;
            let mut rows = Vec::with_capacity(index.len() * l.dim());
            for &(i, t) in &index {
                rows.extend_from_slice(l.per_trajectory[i].row(t));
            }
            Tensor::matrix(index.len(), l.dim(), rows)?
        }
    };
    let targets = labeled_actions(view, &index)?;
    let mut dec = Decoder::new(inputs.cols(), stage.hidden_dim, seed)?;
    let mut r = rng::stream(seed, &[tag::BATCH]);
    let (dz, n) = (inputs.cols(), index.len());
    let mut curve = Vec::new();
    let report_every = (stage.total_updates / 10).max(1);
    let mut sum = 0.0;
    for u in 0..stage.total_updates {
        let rows: Vec<usize> = (0..stage.batch_size).map(|_| r.random_range(0..n)).collect();
        let mut x = Vec::with_capacity(rows.len() * dz);
        let mut y = Vec::with_capacity(rows.len() * 2);
        for &j in &rows {
            x.extend_from_slice(inputs.row(j));
            y.extend_from_slice(targets.row(j));
        }
        sum += dec.train_step(&Tensor::matrix(rows.len(), dz, x)?, &Tensor::matrix(rows.len(), 2, y)?, stage.learning_rate)?;
        if (u + 1) % report_every == 0 {
            curve.push(sum / report_every as f64);
            sum = 0.0;
        }
    }
    Ok((dec, curve))
}

/// Behavior cloning on ground-truth actions of the labeled view.
pub fn train_bc_baseline(view: &LabeledView<'_>, stage: &TrainStage, seed: u64) -> Result<(MlpNet, LossCurve)> {
    if view.budget() == 0 {
        return Err(Error::Config("BC needs at least one labeled trajectory".into()));
    }
    let ds = view.dataset();
    let index = labeled_index(view);
    let mut policy = MlpNet::new("bc", ds.meta().stacked_dim(), stage.hidden_dim, 2, stage.num_res_blocks, seed)?;
    let mut r = rng::stream(seed, &[tag::BATCH]);
    let curve = run_epochs(stage, index.len(), &mut r, |r, lr| {
        let picks: Vec<(usize, usize)> = (0..stage.batch_size).map(|_| index[r.random_range(0..index.len())]).collect();
        policy.train_step(&gather(ds, &picks)?, &labeled_actions(view, &picks)?, lr)
    })?;
    Ok((policy, curve))
}

/// Trains a supervised IDM on labeled (o_t, o_{t+k}) pairs, k uniform in 1..=K.
pub fn train_supervised_idm(view: &LabeledView<'_>, stage: &IdmStage, max_offset: usize, seed: u64) -> Result<SupervisedIdm> {
    if view.budget() == 0 {
        return Err(Error::Config("the IDM baseline needs at least one labeled trajectory".into()));
    }
    let shape = IdmShape {
        obs_dim: view.dataset().meta().stacked_dim(),
        repr_dim: stage.repr_dim,
        width: stage.hidden_dim,
        n_blocks: stage.num_res_blocks,
        max_offset,
    };
    let mut idm = SupervisedIdm::new(shape, seed)?;
    let sched = Schedule::new(stage.learning_rate, stage.warmup_updates.min(stage.total_updates) as u64, stage.total_updates.max(1) as u64)?;
    let mut r = rng::stream(seed, &[tag::LABELED_BATCH]);
    for u in 0..stage.total_updates {
        let b = sample_labeled_batch(view, max_offset, stage.batch_size, &mut r)?;
        idm.train_step(&b.obs_t, &b.obs_tk, &b.actions, sched.lr(u as u64 + 1)?)?;
    }
    Ok(idm)
}

/// Action-prediction MSE of `predict(o_t, o_{t+1})` over every transition
/// of `ds`, scored against the diagnostic ground truth.
pub fn action_prediction_mse(ds: &Dataset, predict: impl Fn(&Tensor, &Tensor) -> Result<Tensor>) -> Result<f64> {
    let diag = ds.diagnostics();
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, tr) in ds.trajectories().iter().enumerate() {
        let h = tr.horizon();
        for start in (0..h).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(h);
            let p = predict(&stacked_range(ds, i, start..end)?, &stacked_range(ds, i, start + 1..end + 1)?)?;
            for (r, t) in (start..end).enumerate() {
                let a = diag.action(i, t);
                sum += (p.row(r)[0] - a[0]).powi(2) + (p.row(r)[1] - a[1]).powi(2);
                n += 2;
            }
        }
    }
    Ok(sum / n.max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct IdmBaselineRun {
    pub idm: SupervisedIdm,
    pub policy: MlpNet,
    pub train_pool_action_mse: f64,
    pub eval_pool_action_mse: f64,
}

/// IDM on labels, pseudo-labels for the full dataset, then BC on them.
pub fn train_idm_relabel_baseline(
    view: &LabeledView<'_>,
    idm_stage: &IdmStage,
    bc_stage: &TrainStage,
    heldout: &Dataset,
    seed: u64,
) -> Result<IdmBaselineRun> {
    let idm = train_supervised_idm(view, idm_stage, 1, seed)?;
    let ds = view.dataset();
    let per_trajectory = ds
        .trajectories()
        .iter()
        .enumerate()
        .map(|(i, tr)| {
            let h = tr.horizon();
            idm.predict(&stacked_range(ds, i, 0..h)?, &stacked_range(ds, i, 1..h + 1)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let pseudo = LatentLabels { k: 1, per_trajectory };
    let (policy, _) = train_latent_bc(ds, &pseudo, bc_stage, rng::derive_seed(seed, &[tag::BATCH, 1]))?;
    let train_pool_action_mse = action_prediction_mse(ds, |a, b| idm.predict(a, b))?;
    let eval_pool_action_mse = action_prediction_mse(heldout, |a, b| idm.predict(a, b))?;
    Ok(IdmBaselineRun { idm, policy, train_pool_action_mse, eval_pool_action_mse })
}

pub fn normalized_score(ret: f64, reference: f64) -> Result<f64> {
    if !(reference > 0.0) {
        return Err(Error::OutOfRange(format!("reference return must be > 0, got {reference}")));
    }
    Ok(ret / reference)
}

/// Held-out linear decodability of actions and distractor state from a
/// frozen representation, as MSE over target variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub action_nmse: f64,
    pub distractor_nmse: f64,
}

/// Fits linear probes on standardized features of the first 80% of
/// trajectories and scores them on the rest.
pub fn minimality_probe(
    ds: &Dataset,
    encode: impl Fn(&Tensor) -> Result<Tensor>,
    updates: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<ProbeReport> {
    if ds.len() < 2 {
        return Err(Error::Config("minimality probing needs at least 2 trajectories".into()));
    }
    let n_fit = ((ds.len() * 4).div_ceil(5)).min(ds.len() - 1);
    let diag = ds.diagnostics();
    let dd = ds.meta().distractor_dim();
    let collect = |trajs: std::ops::Range<usize>| -> Result<(Tensor, Tensor, Tensor)> {
        let (mut f, mut a, mut d) = (Vec::new(), Vec::new(), Vec::new());
        let mut dim = 0;
        for i in trajs {
            let h = ds.trajectories()[i].horizon();
            for start in (0..h).step_by(INFER_CHUNK) {
                let end = (start + INFER_CHUNK).min(h);
                let e = encode(&stacked_range(ds, i, start..end)?)?;
                dim = e.cols();
                f.extend_from_slice(e.data());
            }
            a.extend_from_slice(diag.actions(i));
            for t in 0..h {
                d.extend_from_slice(diag.distractor(i, t));
            }
        }
        let n = a.len() / 2;
        Ok((Tensor::matrix(n, dim, f)?, Tensor::matrix(n, 2, a)?, Tensor::matrix(n, dd, d)?))
    };
    let (mut f_fit, a_fit, d_fit) = collect(0..n_fit)?;
    let (mut f_test, a_test, d_test) = collect(n_fit..ds.len())?;
    let dim = f_fit.cols();
    let n = f_fit.rows();
    let mut mean = vec![0.0; dim];
    let mut var = vec![0.0; dim];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(f_fit.row(r)) {
            *m += v / n as f64;
        }
    }
    for r in 0..n {
        for ((s, v), m) in var.iter_mut().zip(f_fit.row(r)).zip(&mean) {
            *s += (v - m).powi(2) / n as f64;
        }
    }
    let scale: Vec<f64> = var.iter().map(|v| 1.0 / v.sqrt().max(1e-8)).collect();
    for f in [&mut f_fit, &mut f_test] {
        for (j, v) in f.data_mut().iter_mut().enumerate() {
            let c = j % dim;
            *v = (*v - mean[c]) * scale[c];
        }
    }
    let mut r = rng::stream(seed, &[tag::PROBE]);
    let mut fit = |kind, target: &Tensor, test_x: &Tensor, test_y: &Tensor| -> Result<f64> {
        let tc = target.cols();
        let mut probe = Probe::new(kind, dim, tc);
        for _ in 0..updates {
            let rows: Vec<usize> = (0..batch_size).map(|_| r.random_range(0..n)).collect();
            let mut x = Vec::with_capacity(rows.len() * dim);
            let mut y = Vec::with_capacity(rows.len() * tc);
            for &j in &rows {
                x.extend_from_slice(f_fit.row(j));
                y.extend_from_slice(target.row(j));
            }
            probe.step(&Tensor::matrix(rows.len(), dim, x)?, &Tensor::matrix(rows.len(), tc, y)?, lr)?;
        }
        Ok(ratio(probe.mse(test_x, test_y)?, target_variance(test_y)))
    };
    let action_nmse = fit(ProbeKind::ActionFromH, &a_fit, &f_test, &a_test)?;
    let distractor_nmse = if dd > 0 { fit(ProbeKind::DistractorFromH, &d_fit, &f_test, &d_test)? } else { 0.0 };
    Ok(ProbeReport { action_nmse, distractor_nmse })
}
