use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use latentlab::distsuite::{collect_dataset, load_dataset, save_dataset, Dataset, DifficultyConfig, Pool};
use latentlab::error::{Error, ErrorCategory, Result};
use latentlab::lam::LamModel;
use latentlab::pipeline::{
    action_prediction_mse, eval_seed, evaluate_policy, label_seed, method_lam_config, normalized_score, prepare_datasets,
    relabel_latents, stage_seed, train_action_decoder, train_bc_baseline, train_idm_relabel_baseline, train_lam,
    train_latent_bc, write_metrics_csv, write_plot, BcAgent, Decoder, DecoderInput, EvalEnv, Experiment, LamEpochMetrics,
    LatentAgent, Method, MlpNet, PlotKind, ResultRow, ResultsTable, RunConfig, StageSeed,
};

#[derive(Parser)]
#[command(name = "latentlab", version, about = "Latent action learning under exogenous distractors")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Collect an expert dataset.
    Collect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Drop every distractor.
        #[arg(long = "difficulty.none", alias = "difficulty-none")]
        difficulty_none: bool,
    },
    /// Stage 1: pre-train the latent action model.
    TrainLam(StageArgs),
    /// Stage 2: relabel and clone latent actions, or train a baseline policy.
    TrainBc(StageArgs),
    /// Stage 3: fit the latent-to-action decoder.
    TrainDecoder(StageArgs),
    /// Roll out the trained agent and append a results row.
    Eval {
        #[command(flatten)]
        stage: StageArgs,
        #[arg(long, value_enum, default_value_t = PoolArg::Train)]
        pool: PoolArg,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run the configured sweeps; finished cells are reused on rerun.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Render an SVG from a results CSV.
    Plot {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run: PathBuf,
    /// LAPO, LAOM, LAOM_SUP, BC, IDM_RELABEL or BC_FULL.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolArg {
    Train,
    Eval,
}

const CONFIG_FILE: &str = "config.json";
const RUN_FILE: &str = "run.json";
const DATASET_FILE: &str = "dataset.lds";
const LAM_DIR: &str = "lam";
const POLICY_FILE: &str = "policy.params";
const DECODER_FILE: &str = "decoder.params";
const STAGE_INFO_FILE: &str = "stages.json";
const RESULTS_FILE: &str = "results.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunSpec {
    method: Method,
    seed: u64,
    budget: usize,
}

/// Facts later stages need from earlier ones.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct StageInfo {
    lam_final: Option<LamEpochMetrics>,
    policy_dout: Option<usize>,
    decoder_din: Option<usize>,
    eval_pool_action_mse: Option<f64>,
    reference_return: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, label) = match e.category() {
                ErrorCategory::Config => (2, "config"),
                ErrorCategory::MissingPrerequisite => (3, "missing prerequisite"),
                ErrorCategory::Numeric => (4, "numeric"),
                ErrorCategory::Io => (5, "io"),
                ErrorCategory::Contract => (1, "error"),
            };
            eprintln!("latentlab: {label} error: {e}");
            ExitCode::from(code)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Collect { config, out, difficulty_none } => collect(config.as_deref(), &out, difficulty_none),
        Cmd::TrainLam(a) => Stage::open(&a)?.train_lam(),
        Cmd::TrainBc(a) => Stage::open(&a)?.train_bc(),
        Cmd::TrainDecoder(a) => Stage::open(&a)?.train_decoder(),
        Cmd::Eval { stage, pool, episodes } => {
            let pool = match pool {
                PoolArg::Train => Pool::Train,
                PoolArg::Eval => Pool::Eval,
            };
            Stage::open(&stage)?.eval(pool, episodes)
        }
        Cmd::Experiment { config, run } => experiment(config.as_deref(), run.as_deref()),
        Cmd::Plot { results, kind, out } => {
            let kind = PlotKind::parse(&kind)?;
            let table = ResultsTable::read_csv(&results)?;
            write_plot(&table, kind, &out)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    match std::fs::read_to_string(path) {
        Ok(text) => Ok(Some(serde_json::from_str(&text)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn log(dir: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(dir.join("log.txt"))?;
    writeln!(f, "{line}")?;
    Ok(())
}

#[derive(Serialize)]
struct CollectSummary {
    trajectories: usize,
    horizon: usize,
    frame_stack: usize,
    obs_dim: usize,
    transitions: usize,
    mean_expert_return: f64,
    labeled_trajectories: usize,
    difficulty: DifficultyConfig,
}

fn collect(config: Option<&Path>, out: &Path, difficulty_none: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let mut cc = cfg.collect_config();
    if difficulty_none {
        cc.difficulty = DifficultyConfig::none();
    }
    let ds = collect_dataset(&cc)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_dataset(&ds, out)?;
    let summary = CollectSummary {
        trajectories: ds.len(),
        horizon: cc.horizon,
        frame_stack: ds.meta().frame_stack,
        obs_dim: ds.meta().d_obs,
        transitions: ds.n_transitions(),
        mean_expert_return: ds.mean_return(),
        labeled_trajectories: ds.label_mask().iter().filter(|&&m| m).count(),
        difficulty: cc.difficulty,
    };
    let mut side = out.as_os_str().to_owned();
    side.push(".summary.json");
    write_json(Path::new(&side), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

/// A run directory for the single-stage commands.
struct Stage {
    cfg: RunConfig,
    dir: PathBuf,
    spec: RunSpec,
}

impl Stage {
    /// Resolves the config (flag, else the directory's echo, else defaults)
    /// and the run spec, and writes both back.
    fn open(a: &StageArgs) -> Result<Self> {
        std::fs::create_dir_all(&a.run)?;
        let echo = a.run.join(CONFIG_FILE);
        let cfg = match (&a.config, echo.is_file()) {
            (Some(p), true) => {
                let cfg = RunConfig::load(p)?;
                if cfg != RunConfig::load(&echo)? {
                    return Err(Error::Config(format!(
                        "{} was created with a different config; use a fresh run directory",
                        a.run.display()
                    )));
                }
                cfg
            }
            (Some(p), false) => RunConfig::load(p)?,
            (None, true) => RunConfig::load(&echo)?,
            (None, false) => RunConfig::default(),
        };
        std::fs::write(&echo, cfg.to_json())?;
        let prev: Option<RunSpec> = read_json(&a.run.join(RUN_FILE))?;
        let method = match (&a.method, &prev) {
            (Some(m), _) => Method::parse(m)?,
            (None, Some(p)) => p.method,
            (None, None) => Method::Laom,
        };
        let spec = RunSpec {
            method,
            seed: a.seed.or(prev.as_ref().map(|p| p.seed)).unwrap_or(cfg.sweep.seeds[0]),
            budget: a.budget.or(prev.as_ref().map(|p| p.budget)).unwrap_or(cfg.max_budget()),
        };
        if let Some(p) = prev.filter(|p| *p != spec) {
            return Err(Error::Config(format!(
                "run directory holds {} seed {} budget {}; use a fresh directory for a different run",
                p.method.name(),
                p.seed,
                p.budget
            )));
        }
        write_json(&a.run.join(RUN_FILE), &spec)?;
        Ok(Self { cfg, dir: a.run.clone(), spec })
    }

    fn dataset(&self) -> Result<Dataset> {
        if let Some(p) = &self.cfg.dataset.path {
            return load_dataset(p);
        }
        let path = self.dir.join(DATASET_FILE);
        if path.is_file() {
            return load_dataset(&path);
        }
        let ds = collect_dataset(&self.cfg.collect_config())?;
        save_dataset(&ds, &path)?;
        Ok(ds)
    }

    fn info(&self) -> Result<StageInfo> {
        Ok(read_json(&self.dir.join(STAGE_INFO_FILE))?.unwrap_or_default())
    }

    fn set_info(&self, f: impl FnOnce(&mut StageInfo)) -> Result<()> {
        let mut info = self.info()?;
        f(&mut info);
        write_json(&self.dir.join(STAGE_INFO_FILE), &info)
    }

    fn is_latent(&self) -> bool {
        matches!(self.spec.method, Method::Lapo | Method::Laom | Method::LaomSup)
    }

    fn log(&self, what: &str) -> Result<()> {
        let s = &self.spec;
        log(&self.dir, &format!("{what} method={} seed={} budget={}", s.method.name(), s.seed, s.budget))
    }

    fn train_lam(&self) -> Result<()> {
        let lc = method_lam_config(&self.cfg, self.spec.method)
            .ok_or_else(|| Error::Config(format!("method {} has no latent action model", self.spec.method.name())))?;
        let ds = self.dataset()?;
        let view = match self.spec.method {
            Method::LaomSup => Some(ds.labeled_view(self.spec.budget, label_seed(ds.meta(), self.spec.seed))?),
            _ => None,
        };
        let st = &self.cfg.stages;
        let run = train_lam(&lc, &st.lam, st.probe_learning_rate, &ds, view.as_ref(), self.spec.seed)?;
        run.model.save(&self.dir.join(LAM_DIR))?;
        write_metrics_csv(&self.dir.join("metrics").join("lam.csv"), &run.metrics)?;
        let last = run.final_metrics().cloned();
        self.set_info(|i| i.lam_final = last)?;
        self.log("train-lam")
    }

    fn train_bc(&self) -> Result<()> {
        let ds = self.dataset()?;
        let st = &self.cfg.stages;
        let seed = self.spec.seed;
        let view = ds.labeled_view(self.spec.budget, label_seed(ds.meta(), seed))?;
        let (policy, action_mse) = match self.spec.method {
            Method::Lapo | Method::Laom | Method::LaomSup => {
                let model = LamModel::load(&self.dir.join(LAM_DIR))?;
                let latents = relabel_latents(&model, &ds, st.k_relabel)?;
                (train_latent_bc(&ds, &latents, &st.bc, stage_seed(seed, StageSeed::LatentBc))?.0, None)
            }
            Method::Bc => (train_bc_baseline(&view, &st.bc, stage_seed(seed, StageSeed::Bc))?.0, None),
            Method::BcFull => (train_bc_baseline(&ds.full_view(), &st.bc, stage_seed(seed, StageSeed::Bc))?.0, None),
            Method::IdmRelabel => {
                let heldout = collect_dataset(&self.cfg.heldout_config())?;
                let run = train_idm_relabel_baseline(&view, &st.idm, &st.bc, &heldout, stage_seed(seed, StageSeed::IdmRelabel))?;
                (run.policy, Some(run.eval_pool_action_mse))
            }
        };
        policy.save(&self.dir.join(POLICY_FILE))?;
        let dout = policy.dout();
        self.set_info(|i| {
            i.policy_dout = Some(dout);
            if action_mse.is_some() {
                i.eval_pool_action_mse = action_mse;
            }
        })?;
        self.log("train-bc")
    }

    fn load_policy(&self, din: usize) -> Result<MlpNet> {
        let path = self.dir.join(POLICY_FILE);
        let dout = self.info()?.policy_dout;
        let (true, Some(dout)) = (path.is_file(), dout) else {
            return Err(Error::MissingPrerequisite(format!("no policy in {} (run train-bc first)", self.dir.display())));
        };
        let bc = &self.cfg.stages.bc;
        let prefix = if self.is_latent() { "policy" } else { "bc" };
        let mut policy = MlpNet::new(prefix, din, bc.hidden_dim, dout, bc.num_res_blocks, 0)?;
        policy.load_into(&path)?;
        Ok(policy)
    }

    fn train_decoder(&self) -> Result<()> {
        if !self.is_latent() {
            return Err(Error::Config(format!("method {} acts directly and has no decoder", self.spec.method.name())));
        }
        let ds = self.dataset()?;
        let policy = self.load_policy(ds.meta().stacked_dim())?;
        let view = ds.labeled_view(self.spec.budget, label_seed(ds.meta(), self.spec.seed))?;
        let st = &self.cfg.stages;
        let latents = match st.decoder.input {
            DecoderInput::Lam => Some(relabel_latents(&LamModel::load(&self.dir.join(LAM_DIR))?, &ds, st.k_relabel)?),
            DecoderInput::Policy => None,
        };
        let (decoder, _) =
            train_action_decoder(&policy, latents.as_ref(), &view, &st.decoder, stage_seed(self.spec.seed, StageSeed::Decoder))?;
        decoder.save(&self.dir.join(DECODER_FILE))?;
        let din = decoder.din();
        self.set_info(|i| i.decoder_din = Some(din))?;
        self.log("train-decoder")
    }

    fn eval(&self, pool: Pool, episodes: Option<usize>) -> Result<()> {
        let ds = self.dataset()?;
        let policy = self.load_policy(ds.meta().stacked_dim())?;
        let info = self.info()?;
        let env = EvalEnv::from_meta(ds.meta(), self.cfg.env.horizon);
        let episodes = episodes.unwrap_or(self.cfg.env.eval_episodes);
        let seed = self.spec.seed;
        let ret = if self.is_latent() {
            let (true, Some(din)) = (self.dir.join(DECODER_FILE).is_file(), info.decoder_din) else {
                return Err(Error::MissingPrerequisite(format!("no decoder in {} (run train-decoder first)", self.dir.display())));
            };
            let mut decoder = Decoder::new(din, self.cfg.stages.decoder.hidden_dim, 0)?;
            decoder.load_into(&self.dir.join(DECODER_FILE))?;
            evaluate_policy(&mut LatentAgent { policy: &policy, decoder: &decoder }, &env, episodes, pool, eval_seed(seed))?
        } else {
            evaluate_policy(&mut BcAgent { policy: &policy }, &env, episodes, pool, eval_seed(seed))?
        };
        let name = match pool {
            Pool::Train => self.spec.method.name().to_string(),
            Pool::Eval => format!("{}/eval-pool", self.spec.method.name()),
        };
        let budget = if self.spec.method == Method::BcFull { ds.len() } else { self.spec.budget };
        let d_z = self.is_latent().then_some(info.policy_dout).flatten();
        let mut row = ResultRow::new(name, budget, d_z, seed);
        row.return_mean = Some(ret.mean);
        row.return_std = Some(ret.std);
        if self.spec.method == Method::BcFull && pool == Pool::Train {
            self.set_info(|i| i.reference_return = Some(ret.mean))?;
        }
        row.norm_score = self.info()?.reference_return.map(|r| normalized_score(ret.mean, r)).transpose()?;
        if let Some(m) = &info.lam_final {
            row.probe_mse_z = Some(m.probe_nmse_z);
            row.probe_mse_h_action = Some(m.probe_nmse_h_action);
            row.probe_mse_h_distractor = Some(m.probe_nmse_h_distractor);
        }
        row.eval_pool_action_mse = match self.spec.method {
            Method::IdmRelabel => info.eval_pool_action_mse,
            Method::LaomSup => {
                let model = LamModel::load(&self.dir.join(LAM_DIR))?;
                let heldout = collect_dataset(&self.cfg.heldout_config())?;
                Some(action_prediction_mse(&heldout, |a, b| model.sup_predict(&model.idm_infer(a, b, 1)?))?)
            }
            _ => None,
        };
        let path = self.dir.join(RESULTS_FILE);
        let mut table = if path.is_file() { ResultsTable::read_csv(&path)? } else { ResultsTable::new() };
        table.push(row);
        table.write_csv(&path)?;
        println!("{} return {:.3} ± {:.3} over {episodes} episodes", self.spec.method.name(), ret.mean, ret.std);
        self.log("eval")
    }
}

fn experiment(config: Option<&Path>, run: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let dir = run.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.dir.clone());
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_json())?;
    log(&dir, "experiment start")?;
    let (train, heldout) = prepare_datasets(&cfg)?;
    if cfg.output.save_checkpoints && cfg.dataset.path.is_none() {
        save_dataset(&train, &dir.join(DATASET_FILE))?;
    }
    let log_dir = dir.clone();
    let mut ex = Experiment::new(&cfg, &train, &heldout)?.with_run_dir(&dir).with_progress(move |msg| {
        eprintln!("{msg}");
        let _ = log(&log_dir, msg);
    });
    let table = ex.run_all()?;
    table.write_csv(&dir.join(RESULTS_FILE))?;
    for (kind, name) in [
        (PlotKind::Budget, "budget"),
        (PlotKind::Dims, "dims"),
        (PlotKind::Ladder, "ladder"),
        (PlotKind::Minimality, "minimality"),
    ] {
        // Kinds with no rows in this experiment are skipped.
        if let Ok(()) = write_plot(&table, kind, &dir.join("plots").join(format!("{name}.svg"))) {
            log(&dir, &format!("plot {name}"))?;
        }
    }
    log(&dir, "experiment done")?;
    println!("{}", dir.join(RESULTS_FILE).display());
    Ok(())
}
