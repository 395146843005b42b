use std::path::Path;

use serde::{Deserialize, Serialize};

use super::batch::LabeledBatch;
use super::config::{LamConfig, SupGradFlow, TargetMode, Variant};
use crate::error::{Error, Result};
use crate::graphgrad::{
    ema_update, load_params, save_params, Bind, FsqConfig, Gradients, Graph, Linear, NodeId,
    ParamStore, ResMlp, Tensor,
};
use crate::rng::{self, tag};

const PARAMS_FILE: &str = "lam.params";
const TARGET_FILE: &str = "lam_target.params";
const SIDECAR_FILE: &str = "lam_config.json";

#[derive(Debug, Clone, PartialEq)]
enum Nets {
    Lapo { idm_enc: ResMlp, idm: ResMlp, fdm_enc: ResMlp, fdm: ResMlp },
    Laom { enc: ResMlp, idm: ResMlp, fdm: ResMlp, sup: Option<Linear> },
}

/// Loss values of one evaluation plus the detached latents and
/// representations of the unlabeled batch, for probes.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    /// Reconstruction MSE (LAPO) or latent consistency MSE (LAOM).
    pub prediction: f64,
    /// Unweighted supervision MSE, when a labeled batch was used.
    pub supervision: Option<f64>,
    pub z: Tensor,
    pub h: Tensor,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    config: LamConfig,
    obs_dim: usize,
    seed: u64,
}

/// Encoder(s), IDM, FDM, optional supervision head and, for an EMA target,
/// the target encoder copy.
#[derive(Debug, Clone)]
pub struct LamModel {
    cfg: LamConfig,
    obs_dim: usize,
    seed: u64,
    params: ParamStore,
    target: Option<ParamStore>,
    nets: Nets,
    fsq: Option<FsqConfig>,
}

fn init_stream(seed: u64, net: u64) -> crate::rng::Rng {
    rng::stream(seed, &[tag::INIT, net])
}

impl LamModel {
    /// `obs_dim` is the stacked observation width. Every sub-network draws
    /// its initial weights from its own stream, so adding the supervision
    /// head leaves the other weights unchanged.
    pub fn new(cfg: &LamConfig, obs_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamStore::new();
        let (dh, dz, nb) = (cfg.repr_dim, cfg.latent_action_dim, cfg.n_blocks);
        let nets = match cfg.variant {
            Variant::Lapo => Nets::Lapo {
                idm_enc: ResMlp::init(&mut p, "idm_enc", obs_dim, 0, cfg.encoder_width, dh, nb, &mut init_stream(seed, 1))?,
                idm: ResMlp::init(&mut p, "idm", 2 * dh, 2 * dh, cfg.idm_width, dz, nb, &mut init_stream(seed, 2))?,
                fdm_enc: ResMlp::init(&mut p, "fdm_enc", obs_dim, 0, cfg.encoder_width, dh, nb, &mut init_stream(seed, 3))?,
                fdm: ResMlp::init(&mut p, "fdm", dh + dz, dh + dz, cfg.fdm_width, obs_dim, nb, &mut init_stream(seed, 4))?,
            },
            Variant::Laom => {
                let enc = ResMlp::init(&mut p, "enc", obs_dim, 0, cfg.encoder_width, dh, nb, &mut init_stream(seed, 1))?;
                let idm = ResMlp::init(&mut p, "idm", 2 * dh, 2 * dh, cfg.idm_width, dz, nb, &mut init_stream(seed, 2))?;
                let fdm = ResMlp::init(&mut p, "fdm", dh + dz, dh + dz, cfg.fdm_width, dh, nb, &mut init_stream(seed, 4))?;
                let sup = if cfg.supervision {
                    Some(Linear::init(&mut p, "sup", dz, 2, 1.0, &mut init_stream(seed, 5))?)
                } else {
                    None
                };
                Nets::Laom { enc, idm, fdm, sup }
            }
        };
        let target = (cfg.variant == Variant::Laom && cfg.target_mode() == TargetMode::Ema)
            .then(|| p.subset("enc."));
        Ok(Self { cfg: cfg.clone(), obs_dim, seed, params: p, target, nets, fsq: cfg.fsq()? })
    }

    pub fn config(&self) -> &LamConfig {
        &self.cfg
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Direct parameter access, for finite-difference checks and tests.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn target_params(&self) -> Option<&ParamStore> {
        self.target.as_ref()
    }

    pub fn has_supervision_head(&self) -> bool {
        matches!(&self.nets, Nets::Laom { sup: Some(_), .. })
    }

    /// SHA-256 over online and target parameters.
    pub fn digest(&self) -> String {
        match &self.target {
            Some(t) => format!("{}:{}", self.params.digest(), t.digest()),
            None => self.params.digest(),
        }
    }

    fn check_obs(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.obs_dim {
            return Err(Error::shape("lam", format!("expected [B, {}], got {:?}", self.obs_dim, x.shape())));
        }
        Ok(())
    }

    fn encoder(&self) -> &ResMlp {
        match &self.nets {
            Nets::Lapo { idm_enc, .. } => idm_enc,
            Nets::Laom { enc, .. } => enc,
        }
    }

    fn idm_net(&self) -> &ResMlp {
        match &self.nets {
            Nets::Lapo { idm, .. } | Nets::Laom { idm, .. } => idm,
        }
    }

    fn latent(&self, g: &mut Graph, store: &ParamStore, how: Bind, ht: NodeId, hk: NodeId) -> Result<NodeId> {
        let pair = g.concat(&[ht, hk])?;
        let z = self.idm_net().forward(g, store, how, pair, Some(pair))?;
        match &self.fsq {
            Some(f) => g.fsq(z, f),
            None => Ok(z),
        }
    }

    /// Representation h of stacked observations (LAOM: the shared encoder;
    /// LAPO: the IDM-side encoder).
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_obs(x)?;
        self.encoder().apply(&self.params, x.clone(), None)
    }

    /// The target branch: EMA copy, or the online encoder in stop-grad mode.
    pub fn target_encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_obs(x)?;
        match (&self.nets, &self.target) {
            (Nets::Laom { enc, .. }, Some(t)) => enc.apply(t, x.clone(), None),
            (Nets::Laom { enc, .. }, None) => enc.apply(&self.params, x.clone(), None),
            (Nets::Lapo { .. }, _) => Err(Error::Config("LAPO has no target encoder".into())),
        }
    }

    pub fn idm_infer(&self, o_t: &Tensor, o_tk: &Tensor, k: usize) -> Result<Tensor> {
        if k < 1 || k > self.cfg.future_obs_offset {
            return Err(Error::OutOfRange(format!(
                "offset {k} outside 1..={}",
                self.cfg.future_obs_offset
            )));
        }
        self.check_obs(o_t)?;
        self.check_obs(o_tk)?;
        let mut g = Graph::new();
        let (xt, xk) = (g.constant(o_t.clone())?, g.constant(o_tk.clone())?);
        let enc = self.encoder();
        let ht = enc.forward(&mut g, &self.params, Bind::Frozen, xt, None)?;
        let hk = enc.forward(&mut g, &self.params, Bind::Frozen, xk, None)?;
        let z = self.latent(&mut g, &self.params, Bind::Frozen, ht, hk)?;
        Ok(g.value(z).clone())
    }

    /// LAPO: predicted next stacked observation. LAOM: predicted future
    /// representation, always `repr_dim` wide.
    pub fn fdm_predict(&self, o_t: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.check_obs(o_t)?;
        if z.rank() != 2 || z.cols() != self.cfg.latent_action_dim || z.rows() != o_t.rows() {
            return Err(Error::shape("fdm_predict", format!("z {:?}", z.shape())));
        }
        let mut g = Graph::new();
        let x = g.constant(o_t.clone())?;
        let zn = g.constant(z.clone())?;
        let out = self.predict_node(&mut g, Bind::Frozen, x, zn, None)?;
        Ok(g.value(out).clone())
    }

    /// `ht` is the already-encoded LAOM representation of `x`, if available.
    fn predict_node(&self, g: &mut Graph, how: Bind, x: NodeId, z: NodeId, ht: Option<NodeId>) -> Result<NodeId> {
        let p = &self.params;
        match &self.nets {
            Nets::Lapo { fdm_enc, fdm, .. } => {
                let f = fdm_enc.forward(g, p, how, x, None)?;
                let inp = g.concat(&[f, z])?;
                let d = fdm.forward(g, p, how, inp, Some(inp))?;
                g.add(x, d)
            }
            Nets::Laom { enc, fdm, .. } => {
                let h = match ht {
                    Some(h) => h,
                    None => enc.forward(g, p, how, x, None)?,
                };
                let inp = g.concat(&[h, z])?;
                let d = fdm.forward(g, p, how, inp, Some(inp))?;
                g.add(h, d)
            }
        }
    }

    /// Supervision head applied to latents.
    pub fn sup_predict(&self, z: &Tensor) -> Result<Tensor> {
        let Nets::Laom { sup: Some(head), .. } = &self.nets else {
            return Err(Error::Config("model has no supervision head".into()));
        };
        let mut g = Graph::new();
        let zn = g.constant(z.clone())?;
        let out = head.forward(&mut g, &self.params, Bind::Frozen, zn)?;
        Ok(g.value(out).clone())
    }

    fn build_loss(
        &self,
        g: &mut Graph,
        obs_t: &Tensor,
        obs_tk: &Tensor,
        labeled: Option<&LabeledBatch>,
    ) -> Result<(NodeId, NodeId, Option<NodeId>, NodeId, NodeId)> {
        self.check_obs(obs_t)?;
        self.check_obs(obs_tk)?;
        let p = &self.params;
        let xt = g.constant(obs_t.clone())?;
        let xk = g.constant(obs_tk.clone())?;
        let enc = self.encoder();
        let ht = enc.forward(g, p, Bind::Train, xt, None)?;
        let hk = enc.forward(g, p, Bind::Train, xk, None)?;
        let z = self.latent(g, p, Bind::Train, ht, hk)?;
        let prediction = match &self.nets {
            Nets::Lapo { .. } => {
                let pred = self.predict_node(g, Bind::Train, xt, z, None)?;
                g.mse(pred, xk)?
            }
            Nets::Laom { enc, .. } => {
                let pred = self.predict_node(g, Bind::Train, xt, z, Some(ht))?;
                let target = match &self.target {
                    Some(t) => enc.forward(g, t, Bind::Frozen, xk, None)?,
                    None => g.stop_grad(hk)?,
                };
                g.mse(pred, target)?
            }
        };
        let mut sup_loss = None;
        let mut total = prediction;
        if let Nets::Laom { enc, sup: Some(head), .. } = &self.nets {
            let lb = labeled.ok_or_else(|| {
                Error::Config("supervision is on but no labeled batch was given (label budget 0?)".into())
            })?;
            self.check_obs(&lb.obs_t)?;
            self.check_obs(&lb.obs_tk)?;
            let lt = g.constant(lb.obs_t.clone())?;
            let lk = g.constant(lb.obs_tk.clone())?;
            let lht = enc.forward(g, p, Bind::Train, lt, None)?;
            let lhk = enc.forward(g, p, Bind::Train, lk, None)?;
            let mut lz = self.latent(g, p, Bind::Train, lht, lhk)?;
            if self.cfg.sup_grad_flow == SupGradFlow::HeadOnly {
                lz = g.stop_grad(lz)?;
            }
            let pred = head.forward(g, p, Bind::Train, lz)?;
            let a = g.constant(lb.actions.clone())?;
            let s = g.mse(pred, a)?;
            let weighted = g.scale(s, self.cfg.labeled_loss_coef)?;
            total = g.add(prediction, weighted)?;
            sup_loss = Some(s);
        }
        Ok((total, prediction, sup_loss, z, ht))
    }

    fn output(g: &Graph, nodes: (NodeId, NodeId, Option<NodeId>, NodeId, NodeId)) -> LossOutput {
        let (total, prediction, sup, z, h) = nodes;
        LossOutput {
            total: g.value(total).item(),
            prediction: g.value(prediction).item(),
            supervision: sup.map(|s| g.value(s).item()),
            z: g.value(z).clone(),
            h: g.value(h).clone(),
        }
    }

    /// Evaluates the training objective on (already augmented) inputs.
    pub fn lam_loss(&self, obs_t: &Tensor, obs_tk: &Tensor, labeled: Option<&LabeledBatch>) -> Result<LossOutput> {
        let mut g = Graph::new();
        let nodes = self.build_loss(&mut g, obs_t, obs_tk, labeled)?;
        Ok(Self::output(&g, nodes))
    }

    pub fn loss_and_gradients(
        &self,
        obs_t: &Tensor,
        obs_tk: &Tensor,
        labeled: Option<&LabeledBatch>,
    ) -> Result<(LossOutput, Gradients)> {
        let mut g = Graph::new();
        let nodes = self.build_loss(&mut g, obs_t, obs_tk, labeled)?;
        let grads = g.backward(nodes.0)?;
        Ok((Self::output(&g, nodes), grads))
    }

    /// One Adam step followed by the target update when one is due.
    pub fn train_step(
        &mut self,
        obs_t: &Tensor,
        obs_tk: &Tensor,
        labeled: Option<&LabeledBatch>,
        lr: f64,
    ) -> Result<LossOutput> {
        let (out, grads) = self.loss_and_gradients(obs_t, obs_tk, labeled)?;
        self.params.adam_step(&grads, lr)?;
        if self.cfg.variant == Variant::Laom {
            self.target_sync()?;
        }
        Ok(out)
    }

    /// EMA mode: moves the target toward the online encoder when due.
    /// Stop-grad mode has no copy to update.
    pub fn target_sync(&mut self) -> Result<()> {
        if self.cfg.variant == Variant::Lapo {
            return Err(Error::Config("target_sync is defined for LAOM only".into()));
        }
        let ema = self.cfg.ema();
        if let Some(t) = &mut self.target {
            if ema.due(self.params.step()) {
                ema_update(t, &self.params, &ema)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_params(&self.params, &dir.join(PARAMS_FILE))?;
        if let Some(t) = &self.target {
            save_params(t, &dir.join(TARGET_FILE))?;
        }
        let side = Sidecar { config: self.cfg.clone(), obs_dim: self.obs_dim, seed: self.seed };
        std::fs::write(dir.join(SIDECAR_FILE), serde_json::to_string_pretty(&side)? + "\n")?;
        Ok(())
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join(PARAMS_FILE).is_file() && dir.join(SIDECAR_FILE).is_file()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !Self::exists(dir) {
            return Err(Error::MissingPrerequisite(format!(
                "no latent action model in {} (run train-lam first)",
                dir.display()
            )));
        }
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(dir.join(SIDECAR_FILE))?)?;
        let mut model = Self::new(&side.config, side.obs_dim, side.seed)?;
        let params = load_params(&dir.join(PARAMS_FILE))?;
        replace_matching(&mut model.params, params)?;
        if let Some(t) = &mut model.target {
            let loaded = load_params(&dir.join(TARGET_FILE))?;
            replace_matching(t, loaded)?;
        }
        Ok(model)
    }
}

/// Replaces `dst` by `src` after checking both hold the same names and shapes.
fn replace_matching(dst: &mut ParamStore, src: ParamStore) -> Result<()> {
    let same = dst.len() == src.len()
        && dst
            .iter()
            .zip(src.iter())
            .all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
    if !same {
        return Err(Error::Format("checkpoint does not match the configured architecture".into()));
    }
    *dst = src;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant) -> LamConfig {
        LamConfig {
            variant,
            latent_action_dim: 3,
            repr_dim: 4,
            encoder_width: 5,
            idm_width: 5,
            fdm_width: 5,
            n_blocks: 1,
            future_obs_offset: 2,
            use_fsq: false,
            ..LamConfig::default()
        }
    }

    fn obs(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::randn(&[rows, cols], 1.0, &mut rng::stream(seed, &[]))
    }

    #[test]
    fn zero_weight_encoder_outputs_bias() {
        let mut m = LamModel::new(&tiny(Variant::Laom), 6, 0).unwrap();
        let names: Vec<String> = m.params().names().filter(|n| n.starts_with("enc.") && n.ends_with(".w")).map(String::from).collect();
        for n in names {
            let shape = m.params().get(&n).unwrap().shape().to_vec();
            m.params_mut().set(&n, Tensor::zeros(&shape)).unwrap();
        }
        let h = m.encode(&obs(2, 6, 1)).unwrap();
        let bias = m.params().get("enc.out.b").unwrap().data().to_vec();
        assert_eq!(h.row(0), bias.as_slice());
        assert_eq!(h.row(1), bias.as_slice());
    }

    #[test]
    fn encode_is_pure_and_lipschitz() {
        let m = LamModel::new(&tiny(Variant::Laom), 6, 0).unwrap();
        let x = obs(1, 6, 2);
        assert_eq!(m.encode(&x).unwrap(), m.encode(&x).unwrap());
        let eps = 1e-6;
        let mut y = x.clone();
        y.data_mut()[3] += eps;
        let (a, b) = (m.encode(&x).unwrap(), m.encode(&y).unwrap());
        let diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff < 1e3 * eps && diff > 0.0);
    }

    #[test]
    fn fsq_latents_on_grid_and_offset_checked() {
        let cfg = LamConfig { use_fsq: true, ..tiny(Variant::Lapo) };
        let m = LamModel::new(&cfg, 6, 0).unwrap();
        let z = m.idm_infer(&obs(8, 6, 3), &obs(8, 6, 4), 1).unwrap();
        let f = cfg.fsq().unwrap().unwrap();
        assert!(z.data().iter().enumerate().all(|(i, &v)| f.on_grid(i % 3, v)));
        assert!(m.idm_infer(&obs(1, 6, 3), &obs(1, 6, 4), 3).is_err());
    }

    #[test]
    fn prediction_shapes() {
        let laom = LamModel::new(&tiny(Variant::Laom), 6, 0).unwrap();
        let lapo = LamModel::new(&tiny(Variant::Lapo), 6, 0).unwrap();
        let z = Tensor::zeros(&[2, 3]);
        assert_eq!(laom.fdm_predict(&obs(2, 6, 1), &z).unwrap().shape(), [2, 4]);
        assert_eq!(lapo.fdm_predict(&obs(2, 6, 1), &z).unwrap().shape(), [2, 6]);
        assert!(laom.encode(&obs(2, 5, 1)).is_err());
    }

    #[test]
    fn identical_pair_has_fixed_latent() {
        let m = LamModel::new(&tiny(Variant::Laom), 6, 0).unwrap();
        let x = obs(1, 6, 5);
        let a = m.idm_infer(&x, &x, 1).unwrap();
        let b = m.idm_infer(&x, &x, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn target_modes() {
        let ema = LamModel::new(&tiny(Variant::Laom), 6, 0).unwrap();
        assert!(ema.target_params().is_some());
        let sg = LamModel::new(&LamConfig { target_mode: Some(TargetMode::StopGrad), ..tiny(Variant::Laom) }, 6, 0).unwrap();
        let x = obs(3, 6, 6);
        assert_eq!(sg.target_encode(&x).unwrap(), sg.encode(&x).unwrap());
        let mut lapo = LamModel::new(&tiny(Variant::Lapo), 6, 0).unwrap();
        assert!(lapo.target_sync().is_err());
    }

    #[test]
    fn stop_grad_target_carries_no_gradient() {
        // With a frozen predictor, only the target branch could move the
        // encoder; in stop-grad mode its gradient must vanish.
        let cfg = LamConfig { target_mode: Some(TargetMode::StopGrad), ..tiny(Variant::Laom) };
        let m = LamModel::new(&cfg, 6, 0).unwrap();
        let (xt, xk) = (obs(4, 6, 7), obs(4, 6, 8));
        let mut g = Graph::new();
        let p = m.params();
        let Nets::Laom { enc, .. } = &m.nets else { unreachable!() };
        let xkn = g.constant(xk).unwrap();
        let hk = enc.forward(&mut g, p, Bind::Train, xkn, None).unwrap();
        let tgt = g.stop_grad(hk).unwrap();
        let xtn = g.constant(xt).unwrap();
        let ht = enc.forward(&mut g, p, Bind::Frozen, xtn, None).unwrap();
        let loss = g.mse(ht, tgt).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.is_empty() || grads.max_abs() == 0.0);
    }

    #[test]
    fn supervision_requires_labels() {
        let cfg = LamConfig { supervision: true, ..tiny(Variant::Laom) };
        let m = LamModel::new(&cfg, 6, 0).unwrap();
        assert!(m.lam_loss(&obs(2, 6, 1), &obs(2, 6, 2), None).is_err());
        assert!(m.has_supervision_head());
        let lapo_sup = LamConfig { supervision: true, ..tiny(Variant::Lapo) };
        assert!(LamModel::new(&lapo_sup, 6, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = LamModel::new(&tiny(Variant::Laom), 6, 9).unwrap();
        assert!(LamModel::load(dir.path()).is_err());
        m.save(dir.path()).unwrap();
        let back = LamModel::load(dir.path()).unwrap();
        assert_eq!(back.digest(), m.digest());
        assert_eq!(back.config(), m.config());
    }
}
