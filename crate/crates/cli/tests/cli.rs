use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "env": {"horizon": 20, "eval_episodes": 2, "heldout_trajectories": 2},
  "dataset": {"num_trajectories": 8},
  "lam": {"latent_action_dim": 8, "future_obs_offset": 2, "repr_dim": 16},
  "lapo": {"latent_action_dim": 4},
  "stages": {
    "lam": {"num_epochs": 1, "batch_size": 32, "hidden_dim": 16, "num_res_blocks": 1, "warmup_epochs": 0},
    "bc": {"num_epochs": 1, "batch_size": 32, "hidden_dim": 16, "num_res_blocks": 1},
    "decoder": {"total_updates": 5, "batch_size": 16, "hidden_dim": 8},
    "idm": {"total_updates": 5, "batch_size": 16, "hidden_dim": 16, "repr_dim": 8, "num_res_blocks": 1, "warmup_updates": 1, "future_obs_offset": 2},
    "minimality_probe_updates": 5
  },
  "sweep": {
    "methods": ["BC", "LAOM"], "budgets": [2], "seeds": [0],
    "dim_sweep": false, "ablation_ladder": false, "minimality": false, "clean_quantization": false
  }
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latentlab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn latentlab")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn assert_ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn collect_is_deterministic_and_writes_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a.lds"), tmp.path().join("b.lds"));
    assert_ok(&run(&["collect", "--config", s(&cfg), "--out", s(&a)]));
    assert_ok(&run(&["collect", "--config", s(&cfg), "--out", s(&b)]));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("a.lds.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["trajectories"], 8);
    assert_eq!(summary["horizon"], 20);
    assert_eq!(summary["frame_stack"], 3);
}

#[test]
fn collect_without_distractors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("clean.lds");
    assert_ok(&run(&["collect", "--config", s(&cfg), "--out", s(&out), "--difficulty.none"]));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("clean.lds.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["difficulty"]["n_particles"], 0);
    assert_eq!(summary["difficulty"]["shake_scale"], 0.0);
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"lam": {"latent_dims": 3}}"#).unwrap();
    let out = run(&["collect", "--config", s(&cfg), "--out", s(&tmp.path().join("x.lds"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("x.lds").exists());
}

#[test]
fn unknown_method_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = run(&["train-lam", "--config", s(&cfg), "--run", s(&tmp.path().join("r")), "--method", "VQ"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn decoder_before_bc_is_a_missing_prerequisite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let dir = tmp.path().join("run");
    let out = run(&["train-decoder", "--config", s(&cfg), "--run", s(&dir), "--method", "LAOM"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-bc"));
}

#[test]
fn bc_before_lam_is_a_missing_prerequisite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = run(&["train-bc", "--config", s(&cfg), "--run", s(&tmp.path().join("run")), "--method", "LAOM"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-lam"));
}

#[test]
fn eval_before_decoder_is_a_missing_prerequisite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let dir = tmp.path().join("run");
    for cmd in ["train-lam", "train-bc"] {
        assert_ok(&run(&[cmd, "--config", s(&cfg), "--run", s(&dir), "--method", "LAOM"]));
    }
    let out = run(&["eval", "--run", s(&dir)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-decoder"));
}

#[test]
fn three_stages_then_eval_on_both_pools() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let dir = tmp.path().join("run");
    let args = ["--config", s(&cfg), "--run", s(&dir), "--method", "LAOM_SUP", "--budget", "2"];
    for cmd in ["train-lam", "train-bc", "train-decoder", "eval"] {
        assert_ok(&bin().arg(cmd).args(args).output().unwrap());
    }
    assert_ok(&run(&["eval", "--run", s(&dir), "--pool", "eval"]));
    let csv = std::fs::read_to_string(dir.join("results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("LAOM_SUP,2,8,0,"));
    assert!(lines[2].starts_with("LAOM_SUP/eval-pool,2,8,0,"));
    assert!(dir.join("metrics").join("lam.csv").is_file());

    // a different run spec in the same directory is refused
    let out = run(&["train-bc", "--run", s(&dir), "--method", "LAOM"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_echo_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_ok(&run(&["train-lam", "--config", s(&cfg), "--run", s(&a), "--method", "LAPO"]));
    let echo = a.join("config.json");
    assert_ok(&run(&["train-lam", "--config", s(&echo), "--run", s(&b), "--method", "LAPO"]));
    let mut files: Vec<String> = ["metrics/lam.csv", "dataset.lds", "config.json"].map(String::from).to_vec();
    for e in std::fs::read_dir(a.join("lam")).unwrap() {
        files.push(format!("lam/{}", e.unwrap().file_name().to_string_lossy()));
    }
    for f in &files {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }

    // a conflicting config for an existing run directory is refused
    let other = tmp.path().join("other.json");
    std::fs::write(&other, r#"{"dataset": {"num_trajectories": 9}}"#).unwrap();
    let out = run(&["train-lam", "--config", s(&other), "--run", s(&a)]);
    assert_eq!(out.status.code(), Some(2));
}

const HEADER: &str = "method,budget,d_z,seed,probe_mse_z,probe_mse_h_action,probe_mse_h_distractor,return_mean,return_std,norm_score,eval_pool_action_mse\n";

#[test]
fn plot_of_empty_csv_fails_without_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("r.csv");
    std::fs::write(&csv, HEADER).unwrap();
    let svg = tmp.path().join("p.svg");
    let out = run(&["plot", "--results", s(&csv), "--kind", "budget", "--out", s(&svg)]);
    assert!(!out.status.success());
    assert!(!svg.exists());
}

#[test]
fn plot_unknown_kind_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("r.csv");
    std::fs::write(&csv, format!("{HEADER}LAOM,2,8,0,,,,1.0,0.0,0.5,\n")).unwrap();
    let out = run(&["plot", "--results", s(&csv), "--kind", "pie", "--out", s(&tmp.path().join("p.svg"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn single_seed_plot_omits_std_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("r.csv");
    std::fs::write(&csv, format!("{HEADER}LAOM,2,8,0,,,,1.0,0.0,0.5,\nBC,2,,0,,,,1.0,0.0,0.25,\n")).unwrap();
    let (p, q) = (tmp.path().join("p.svg"), tmp.path().join("q.svg"));
    assert_ok(&run(&["plot", "--results", s(&csv), "--kind", "budget", "--out", s(&p)]));
    assert_ok(&run(&["plot", "--results", s(&csv), "--kind", "budget", "--out", s(&q)]));
    let svg = std::fs::read_to_string(&p).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.contains("0.500"));
    assert!(!svg.contains('±'));
    assert_eq!(svg, std::fs::read_to_string(&q).unwrap());
}

#[test]
fn experiment_resumes_to_identical_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let dir = tmp.path().join("exp");
    assert_ok(&run(&["experiment", "--config", s(&cfg), "--run", s(&dir)]));
    let first = std::fs::read(dir.join("results.csv")).unwrap();
    assert!(dir.join("plots").join("budget.svg").is_file());

    // drop one finished cell, as if interrupted, and rerun
    let cells: Vec<PathBuf> =
        std::fs::read_dir(dir.join("cells")).unwrap().map(|e| e.unwrap().path()).filter(|p| p.to_string_lossy().contains("LAOM")).collect();
    assert!(!cells.is_empty());
    std::fs::remove_file(&cells[0]).unwrap();
    assert_ok(&run(&["experiment", "--config", s(&cfg), "--run", s(&dir)]));
    assert_eq!(first, std::fs::read(dir.join("results.csv")).unwrap());

    let fresh = tmp.path().join("fresh");
    assert_ok(&run(&["experiment", "--config", s(&cfg), "--run", s(&fresh)]));
    assert_eq!(first, std::fs::read(fresh.join("results.csv")).unwrap());
}
