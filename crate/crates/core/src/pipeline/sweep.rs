use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{DecoderInput, Method, RunConfig};
use super::eval::{evaluate_policy, Agent, BcAgent, EvalEnv, EvalResult, ExpertAgent, LatentAgent, RandomAgent};
use super::nets::MlpNet;
use super::results::{write_atomic, write_metrics_csv, ResultRow, ResultsTable};
use super::stages::{
    action_prediction_mse, minimality_probe, normalized_score, relabel_latents, train_action_decoder,
    train_bc_baseline, train_idm_relabel_baseline, train_lam, train_latent_bc, train_supervised_idm, LamRun,
};
use crate::distsuite::{collect_dataset, Dataset, DifficultyConfig};
use crate::error::{Error, Result};
use crate::lam::{LamConfig, LamModel, TargetMode, Variant};
use crate::rng::{derive_seed, tag};

pub const LADDER_RUNGS: [&str; 6] =
    ["LAPO+quant", "LAPO", "+multi-step", "+capacity", "+latent-consistency", "+augmentations"];

/// Representations compared in the minimality report.
pub const MINIMALITY_MODELS: [&str; 4] = ["LAOM", "LAOM_SUP", "IDM_MULTISTEP", "RANDOM_ENCODER"];

/// One independent unit of an experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cell {
    /// BC on every label (the normalization reference), the scripted expert
    /// and a uniform-random policy.
    Reference { seed: u64 },
    Budget { method: Method, budget: usize, seed: u64 },
    Dim { method: Method, d_z: usize, seed: u64 },
    Ladder { rung: usize, seed: u64 },
    /// The two quantization rungs on a distractor-free dataset.
    CleanQuant { seed: u64 },
    Minimality { seed: u64 },
}

impl Cell {
    pub fn key(&self) -> String {
        match self {
            Cell::Reference { seed } => format!("reference-s{seed}"),
            Cell::Budget { method, budget, seed } => format!("budget-{}-b{budget}-s{seed}", method.name()),
            Cell::Dim { method, d_z, seed } => format!("dims-{}-d{d_z}-s{seed}", method.name()),
            Cell::Ladder { rung, seed } => format!("ladder-r{rung}-s{seed}"),
            Cell::CleanQuant { seed } => format!("clean-quant-s{seed}"),
            Cell::Minimality { seed } => format!("minimality-s{seed}"),
        }
    }

    pub fn seed(&self) -> u64 {
        match *self {
            Cell::Reference { seed }
            | Cell::Budget { seed, .. }
            | Cell::Dim { seed, .. }
            | Cell::Ladder { seed, .. }
            | Cell::CleanQuant { seed }
            | Cell::Minimality { seed } => seed,
        }
    }
}

/// Cells implied by the sweep flags, in the order their rows are written.
pub fn plan(cfg: &RunConfig) -> Vec<Cell> {
    let s = &cfg.sweep;
    let mut cells: Vec<Cell> = s.seeds.iter().map(|&seed| Cell::Reference { seed }).collect();
    if s.budget_sweep {
        for &method in s.methods.iter().filter(|m| **m != Method::BcFull) {
            for &budget in &s.budgets {
                for &seed in &s.seeds {
                    cells.push(Cell::Budget { method, budget, seed });
                }
            }
        }
    }
    if s.dim_sweep {
        for method in [Method::Laom, Method::LaomSup] {
            for &d_z in &s.latent_dims {
                for &seed in &s.seeds {
                    cells.push(Cell::Dim { method, d_z, seed });
                }
            }
        }
    }
    if s.ablation_ladder {
        for rung in 0..LADDER_RUNGS.len() {
            for &seed in &s.seeds {
                cells.push(Cell::Ladder { rung, seed });
            }
        }
    }
    if s.clean_quantization {
        cells.extend(s.seeds.iter().map(|&seed| Cell::CleanQuant { seed }));
    }
    if s.minimality {
        cells.extend(s.seeds.iter().map(|&seed| Cell::Minimality { seed }));
    }
    cells
}

/// LAM configs of the ablation ladder, from original LAPO to full LAOM.
pub fn ladder_configs(cfg: &RunConfig) -> Vec<LamConfig> {
    let quant = LamConfig { supervision: false, ..cfg.lapo.clone() };
    let no_quant = LamConfig { use_fsq: false, ..quant.clone() };
    let multi = LamConfig { future_obs_offset: cfg.lam.future_obs_offset, ..no_quant.clone() };
    let capacity = LamConfig { latent_action_dim: cfg.lam.latent_action_dim, ..multi.clone() };
    let consistency = LamConfig {
        variant: Variant::Laom,
        use_aug: false,
        supervision: false,
        target_mode: Some(TargetMode::Ema),
        ..cfg.lam.clone()
    };
    let full = LamConfig { supervision: false, ..cfg.lam.clone() };
    vec![quant, no_quant, multi, capacity, consistency, full]
}

/// Sub-seeds of one experiment seed, shared by the sweep runner and the
/// single-stage commands so both train identical networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSeed {
    LatentBc = 2,
    Decoder = 3,
    Bc = 4,
    IdmRelabel = 5,
    MultiStepIdm = 6,
    RandomEncoder = 7,
}

pub fn stage_seed(seed: u64, stage: StageSeed) -> u64 {
    derive_seed(seed, &[stage as u64])
}

/// Seed of the label permutation, so every method at `(seed, budget)` reads
/// the same trajectories.
pub fn label_seed(meta: &crate::distsuite::DatasetMeta, seed: u64) -> u64 {
    derive_seed(meta.label_seed, &[tag::LABELS, seed])
}

pub fn eval_seed(seed: u64) -> u64 {
    derive_seed(seed, &[tag::EVAL])
}

/// The LAM config a method trains with.
pub fn method_lam_config(cfg: &RunConfig, method: Method) -> Option<LamConfig> {
    match method {
        Method::Lapo => Some(LamConfig { supervision: false, ..cfg.lapo.clone() }),
        Method::Laom => Some(LamConfig { supervision: false, ..cfg.lam.clone() }),
        Method::LaomSup => Some(LamConfig { supervision: true, ..cfg.lam.clone() }),
        _ => None,
    }
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

#[derive(Serialize, Deserialize)]
struct CellRecord {
    key: String,
    config_digest: String,
    rows_sha256: String,
    rows: Vec<ResultRow>,
}

fn rows_digest(rows: &[ResultRow]) -> String {
    sha_hex(&[serde_json::to_string(rows).expect("rows serialize").as_bytes()])
}

/// Runs the cells of one experiment, caching LAMs and latent policies in
/// memory and finished cells on disk.
pub struct Experiment<'a> {
    cfg: &'a RunConfig,
    train: &'a Dataset,
    heldout: &'a Dataset,
    clean: Option<Dataset>,
    run_dir: Option<PathBuf>,
    config_digest: String,
    lams: HashMap<String, LamRun>,
    policies: HashMap<String, MlpNet>,
    references: HashMap<u64, f64>,
    progress: Box<dyn FnMut(&str) + 'a>,
}

impl<'a> Experiment<'a> {
    pub fn new(cfg: &'a RunConfig, train: &'a Dataset, heldout: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        if train.meta().stacked_dim() != heldout.meta().stacked_dim() {
            return Err(Error::Config("train and held-out datasets differ in observation shape".into()));
        }
        let config_digest = sha_hex(&[cfg.to_json().as_bytes(), format!("{:?}", train.meta()).as_bytes()]);
        Ok(Self {
            cfg,
            train,
            heldout,
            clean: None,
            run_dir: None,
            config_digest,
            lams: HashMap::new(),
            policies: HashMap::new(),
            references: HashMap::new(),
            progress: Box::new(|_| {}),
        })
    }

    /// Finished cells and per-epoch metrics go under `dir`.
    pub fn with_run_dir(mut self, dir: &Path) -> Self {
        self.run_dir = Some(dir.to_path_buf());
        self
    }

    pub fn with_progress(mut self, f: impl FnMut(&str) + 'a) -> Self {
        self.progress = Box::new(f);
        self
    }

    /// Runs every planned cell and returns rows in plan order.
    pub fn run_all(&mut self) -> Result<ResultsTable> {
        let cells = plan(self.cfg);
        self.run_cells(&cells)
    }

    pub fn run_cells(&mut self, cells: &[Cell]) -> Result<ResultsTable> {
        let mut table = ResultsTable::new();
        // Scores need the reference of their seed, so references go first.
        let mut order: Vec<&Cell> = cells.iter().filter(|c| matches!(c, Cell::Reference { .. })).collect();
        order.extend(cells.iter().filter(|c| !matches!(c, Cell::Reference { .. })));
        let mut by_key = HashMap::new();
        for (i, cell) in order.iter().enumerate() {
            (self.progress)(&format!("[{}/{}] {}", i + 1, order.len(), cell.key()));
            by_key.insert(cell.key(), self.run_cell(cell)?);
        }
        for cell in cells {
            table.extend(by_key[&cell.key()].iter().cloned());
        }
        Ok(table)
    }

    fn cell_path(&self, cell: &Cell) -> Option<PathBuf> {
        self.run_dir.as_ref().map(|d| d.join("cells").join(format!("{}.json", cell.key())))
    }

    fn load_cell(&self, cell: &Cell) -> Option<Vec<ResultRow>> {
        let text = std::fs::read_to_string(self.cell_path(cell)?).ok()?;
        let rec: CellRecord = serde_json::from_str(&text).ok()?;
        (rec.key == cell.key() && rec.config_digest == self.config_digest && rec.rows_sha256 == rows_digest(&rec.rows))
            .then_some(rec.rows)
    }

    pub fn run_cell(&mut self, cell: &Cell) -> Result<Vec<ResultRow>> {
        let rows = match self.load_cell(cell) {
            Some(rows) => {
                (self.progress)(&format!("{} cached", cell.key()));
                rows
            }
            None => {
                let rows = self.compute_cell(cell)?;
                if let Some(path) = self.cell_path(cell) {
                    let rec = CellRecord {
                        key: cell.key(),
                        config_digest: self.config_digest.clone(),
                        rows_sha256: rows_digest(&rows),
                        rows: rows.clone(),
                    };
                    write_atomic(&path, serde_json::to_string_pretty(&rec)?.as_bytes())?;
                }
                rows
            }
        };
        if let Cell::Reference { seed } = cell {
            if let Some(r) = rows.iter().find(|r| r.method == Method::BcFull.name()).and_then(|r| r.return_mean) {
                self.references.insert(*seed, r);
            }
        }
        Ok(rows)
    }

    fn compute_cell(&mut self, cell: &Cell) -> Result<Vec<ResultRow>> {
        match *cell {
            Cell::Reference { seed } => self.reference_rows(seed),
            Cell::Budget { method, budget, seed } => {
                let lam = self.cfg.lam.clone();
                Ok(vec![self.method_row(method, method.name(), budget, &lam, seed)?])
            }
            Cell::Dim { method, d_z, seed } => {
                let lam = LamConfig { latent_action_dim: d_z, ..self.cfg.lam.clone() };
                let name = format!("dims/{}", method.name());
                Ok(vec![self.method_row(method, &name, self.cfg.max_budget(), &lam, seed)?])
            }
            Cell::Ladder { rung, seed } => {
                let lc = ladder_configs(self.cfg).swap_remove(rung);
                let run = self.lam(&lc, seed, None, false)?;
                Ok(vec![lam_probe_row(&format!("ladder/{}", LADDER_RUNGS[rung]), &lc, seed, run)])
            }
            Cell::CleanQuant { seed } => {
                let mut rows = Vec::new();
                for (rung, lc) in ladder_configs(self.cfg).into_iter().take(2).enumerate() {
                    let run = self.lam(&lc, seed, None, true)?;
                    rows.push(lam_probe_row(&format!("clean/{}", LADDER_RUNGS[rung]), &lc, seed, run));
                }
                Ok(rows)
            }
            Cell::Minimality { seed } => self.minimality_rows(seed),
        }
    }

    fn label_seed(&self, seed: u64) -> u64 {
        label_seed(self.train.meta(), seed)
    }

    fn eval_env(&self) -> EvalEnv {
        EvalEnv::from_meta(self.train.meta(), self.cfg.env.horizon)
    }

    fn evaluate(&self, agent: &mut dyn Agent, seed: u64) -> Result<EvalResult> {
        evaluate_policy(agent, &self.eval_env(), self.cfg.env.eval_episodes, self.cfg.env.eval_pool, eval_seed(seed))
    }

    fn reference(&self, seed: u64) -> Result<f64> {
        self.references
            .get(&seed)
            .copied()
            .ok_or_else(|| Error::MissingPrerequisite(format!("reference return for seed {seed}")))
    }

    fn scored(&self, mut row: ResultRow, ret: &EvalResult, seed: u64) -> Result<ResultRow> {
        row.return_mean = Some(ret.mean);
        row.return_std = Some(ret.std);
        row.norm_score = Some(normalized_score(ret.mean, self.reference(seed)?)?);
        Ok(row)
    }

    fn reference_rows(&mut self, seed: u64) -> Result<Vec<ResultRow>> {
        let full = self.train.full_view();
        let (policy, _) = train_bc_baseline(&full, &self.cfg.stages.bc, stage_seed(seed, StageSeed::Bc))?;
        let bc = self.evaluate(&mut BcAgent { policy: &policy }, seed)?;
        self.references.insert(seed, bc.mean);
        let expert = self.evaluate(
            &mut ExpertAgent { sigma: self.train.meta().expert_noise, rng: crate::rng::stream(seed, &[tag::EXPERT]) },
            seed,
        )?;
        let random = self.evaluate(&mut RandomAgent { rng: crate::rng::stream(seed, &[tag::EVAL, 1]) }, seed)?;
        let n = self.train.len();
        Ok(vec![
            self.scored(ResultRow::new(Method::BcFull.name(), n, None, seed), &bc, seed)?,
            self.scored(ResultRow::new("EXPERT", n, None, seed), &expert, seed)?,
            self.scored(ResultRow::new("RANDOM", 0, None, seed), &random, seed)?,
        ])
    }

    fn lam_key(lc: &LamConfig, seed: u64, budget: Option<usize>, clean: bool) -> String {
        let json = serde_json::to_string(lc).expect("config serializes");
        let key = sha_hex(&[json.as_bytes(), &seed.to_le_bytes(), format!("{budget:?}{clean}").as_bytes()]);
        key[..16].to_string()
    }

    fn clean_dataset(&mut self) -> Result<&Dataset> {
        if self.clean.is_none() {
            let cc = crate::distsuite::CollectConfig { difficulty: DifficultyConfig::none(), ..self.cfg.collect_config() };
            self.clean = Some(collect_dataset(&cc)?);
        }
        Ok(self.clean.as_ref().expect("just set"))
    }

    /// Trains (or reuses) a LAM. `budget` is set only for supervised runs.
    fn lam(&mut self, lc: &LamConfig, seed: u64, budget: Option<usize>, clean: bool) -> Result<&LamRun> {
        let key = Self::lam_key(lc, seed, budget, clean);
        if !self.lams.contains_key(&key) {
            let label_seed = self.label_seed(seed);
            let cfg = self.cfg;
            let ds: &Dataset = if clean { self.clean_dataset()? } else { self.train };
            let view = budget.map(|b| ds.labeled_view(b, label_seed)).transpose()?;
            let run = train_lam(lc, &cfg.stages.lam, cfg.stages.probe_learning_rate, ds, view.as_ref(), seed)?;
            if let Some(dir) = &self.run_dir {
                write_metrics_csv(&dir.join("metrics").join(format!("lam-{key}.csv")), &run.metrics)?;
            }
            self.lams.insert(key.clone(), run);
        }
        Ok(&self.lams[&key])
    }

    /// Latent BC policy on top of a cached LAM.
    fn latent_policy(&mut self, lc: &LamConfig, seed: u64, budget: Option<usize>) -> Result<String> {
        let key = Self::lam_key(lc, seed, budget, false);
        if !self.policies.contains_key(&key) {
            let k = self.cfg.stages.k_relabel;
            let bc = self.cfg.stages.bc.clone();
            let train = self.train;
            let run = self.lam(lc, seed, budget, false)?;
            let latents = relabel_latents(&run.model, train, k)?;
            let (policy, _) = train_latent_bc(train, &latents, &bc, stage_seed(seed, StageSeed::LatentBc))?;
            self.policies.insert(key.clone(), policy);
        }
        Ok(key)
    }

    fn method_row(&mut self, method: Method, name: &str, budget: usize, laom: &LamConfig, seed: u64) -> Result<ResultRow> {
        let view = self.train.labeled_view(budget, self.label_seed(seed))?;
        let stages = &self.cfg.stages;
        match method {
            Method::Bc | Method::BcFull => {
                let view = if method == Method::BcFull { self.train.full_view() } else { view };
                let (policy, _) = train_bc_baseline(&view, &stages.bc, stage_seed(seed, StageSeed::Bc))?;
                let ret = self.evaluate(&mut BcAgent { policy: &policy }, seed)?;
                self.scored(ResultRow::new(name, view.budget(), None, seed), &ret, seed)
            }
            Method::IdmRelabel => {
                let run = train_idm_relabel_baseline(&view, &stages.idm, &stages.bc, self.heldout, stage_seed(seed, StageSeed::IdmRelabel))?;
                let ret = self.evaluate(&mut BcAgent { policy: &run.policy }, seed)?;
                let mut row = ResultRow::new(name, budget, None, seed);
                row.eval_pool_action_mse = Some(run.eval_pool_action_mse);
                self.scored(row, &ret, seed)
            }
            Method::Lapo | Method::Laom | Method::LaomSup => {
                let lc = LamConfig { supervision: method == Method::LaomSup, ..laom.clone() };
                let lc = if method == Method::Lapo { method_lam_config(self.cfg, method).expect("LAM method") } else { lc };
                let lam_budget = (method == Method::LaomSup).then_some(budget);
                let pkey = self.latent_policy(&lc, seed, lam_budget)?;
                let run = &self.lams[&Self::lam_key(&lc, seed, lam_budget, false)];
                let latents = match stages.decoder.input {
                    DecoderInput::Lam => Some(relabel_latents(&run.model, self.train, stages.k_relabel)?),
                    DecoderInput::Policy => None,
                };
                let policy = &self.policies[&pkey];
                let (decoder, _) = train_action_decoder(policy, latents.as_ref(), &view, &stages.decoder, stage_seed(seed, StageSeed::Decoder))?;
                let ret = self.evaluate(&mut LatentAgent { policy, decoder: &decoder }, seed)?;
                let mut row = lam_probe_row(name, &lc, seed, run);
                row.budget = budget;
                if method == Method::LaomSup {
                    let model = &run.model;
                    row.eval_pool_action_mse =
                        Some(action_prediction_mse(self.heldout, |a, b| model.sup_predict(&model.idm_infer(a, b, 1)?))?);
                }
                self.scored(row, &ret, seed)
            }
        }
    }

    fn minimality_rows(&mut self, seed: u64) -> Result<Vec<ResultRow>> {
        let cfg = self.cfg;
        let st = &cfg.stages;
        let budget = cfg.max_budget();
        let train = self.train;
        let probe = |ds: &Dataset, enc: &dyn Fn(&crate::graphgrad::Tensor) -> Result<crate::graphgrad::Tensor>| {
            minimality_probe(ds, enc, st.minimality_probe_updates, st.minimality_probe_learning_rate, st.lam.batch_size, derive_seed(seed, &[tag::PROBE]))
        };
        let mut reports = Vec::new();
        let laom = LamConfig { supervision: false, ..cfg.lam.clone() };
        let m = &self.lam(&laom, seed, None, false)?.model;
        reports.push(probe(train, &|x| m.encode(x))?);
        let sup = LamConfig { supervision: true, ..cfg.lam.clone() };
        let m = &self.lam(&sup, seed, Some(budget), false)?.model;
        reports.push(probe(train, &|x| m.encode(x))?);
        let view = train.labeled_view(budget, self.label_seed(seed))?;
        let idm = train_supervised_idm(&view, &st.idm, st.idm.future_obs_offset, stage_seed(seed, StageSeed::MultiStepIdm))?;
        reports.push(probe(train, &|x| idm.encode(x))?);
        let random = LamModel::new(&laom, train.meta().stacked_dim(), stage_seed(seed, StageSeed::RandomEncoder))?;
        reports.push(probe(train, &|x| random.encode(x))?);
        Ok(MINIMALITY_MODELS
            .iter()
            .zip(reports)
            .map(|(name, r)| {
                let mut row = ResultRow::new(format!("minimality/{name}"), budget, None, seed);
                row.probe_mse_h_action = Some(r.action_nmse);
                row.probe_mse_h_distractor = Some(r.distractor_nmse);
                row
            })
            .collect())
    }
}

fn lam_probe_row(name: &str, lc: &LamConfig, seed: u64, run: &LamRun) -> ResultRow {
    let mut row = ResultRow::new(name, 0, Some(lc.latent_action_dim), seed);
    if let Some(m) = run.final_metrics() {
        row.probe_mse_z = Some(m.probe_nmse_z);
        row.probe_mse_h_action = Some(m.probe_nmse_h_action);
        row.probe_mse_h_distractor = Some(m.probe_nmse_h_distractor);
    }
    row
}

/// Collects (or loads) the training dataset and the held-out pool dataset.
pub fn prepare_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let train = match &cfg.dataset.path {
        Some(p) => crate::distsuite::load_dataset(p)?,
        None => collect_dataset(&cfg.collect_config())?,
    };
    let heldout = collect_dataset(&cfg.heldout_config())?;
    Ok((train, heldout))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_counts() {
        let cfg = RunConfig::default();
        let cells = plan(&cfg);
        let n_seeds = 3;
        let budget_cells = cells.iter().filter(|c| matches!(c, Cell::Budget { .. })).count();
        assert_eq!(budget_cells, 5 * 5 * n_seeds);
        assert_eq!(cells.iter().filter(|c| matches!(c, Cell::Ladder { .. })).count(), 6 * n_seeds);
        let keys: std::collections::HashSet<_> = cells.iter().map(Cell::key).collect();
        assert_eq!(keys.len(), cells.len());
    }

    #[test]
    fn ladder_has_six_rungs_ending_in_laom() {
        let cfg = RunConfig::default();
        let l = ladder_configs(&cfg);
        assert_eq!(l.len(), LADDER_RUNGS.len());
        assert!(l[0].use_fsq && !l[1].use_fsq);
        assert_eq!(l[1].future_obs_offset, 1);
        assert_eq!(l[2].future_obs_offset, cfg.lam.future_obs_offset);
        assert_eq!(l[3].latent_action_dim, cfg.lam.latent_action_dim);
        assert_eq!(l[4].variant, Variant::Laom);
        assert!(!l[4].use_aug && l[5].use_aug);
        assert_eq!(l[5], cfg.lam);
    }
}
