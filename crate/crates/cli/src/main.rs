//! `lmpc`: dataset generation, offline pretraining, online finetuning,
//! evaluation and test-time lambda sweeps.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
//! configuration error.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use latent_mpc::config::RunConfig;
use latent_mpc::envs::{gen_medium_dataset, EnvId, EnvSpec, ToyEnv, MEDIUM_NOISE_REACH2D};
use latent_mpc::netcore::Checkpoint;
use latent_mpc::pipeline::{evaluate, gen_medium_replay_dataset, RunDir, Stage, Trainer};
use latent_mpc::replay::Dataset;
use latent_mpc::Error;

#[derive(Parser, Debug)]
#[command(name = "lmpc", version, about = "Latent world-model MPC: offline pretraining and online finetuning")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output: the dataset file for gen-data, the run directory otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// `key=value` config override; repeatable, applied in order.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write an offline dataset.
    GenData(GenDataArgs),
    /// Pretrain a model on an offline dataset.
    Pretrain(PretrainArgs),
    /// Finetune online from a checkpoint, or train online from scratch.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Evaluate a checkpoint over a grid of uncertainty coefficients.
    Sweep(SweepArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Kind {
    Medium,
    MediumReplay,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// reach2d or push2d.
    #[arg(long, default_value = "reach2d")]
    env: String,
    #[arg(long, value_enum, default_value_t = Kind::Medium)]
    kind: Kind,
    /// Episode count (medium).
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    /// Transition prefix length (medium-replay).
    #[arg(long, default_value_t = 2500)]
    transitions: usize,
    /// Action noise of the scripted controller (medium).
    #[arg(long, default_value_t = MEDIUM_NOISE_REACH2D)]
    noise: f64,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Offline dataset; defaults to `train.dataset` from the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    /// Pretrained checkpoint.
    #[arg(long, conflicts_with = "from_scratch", required_unless_present = "from_scratch")]
    checkpoint: Option<PathBuf>,
    /// Train online from a fresh model with an empty offline buffer.
    #[arg(long)]
    from_scratch: bool,
    /// Online trials; defaults to `train.online_trials`.
    #[arg(long)]
    trials: Option<usize>,
    /// Offline dataset mixed into every batch; defaults to `train.dataset`.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Uncertainty coefficient used at test time.
    #[arg(long)]
    lambda: Option<f64>,
    /// Episode count; defaults to `train.eval_episodes`.
    #[arg(long)]
    episodes: Option<usize>,
    /// Print one row per episode.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.3,1,3,10,20")]
    lambdas: Vec<f64>,
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl fmt::Display) -> Self {
        Self { code: 2, message: message.to_string() }
    }

    fn runtime(message: impl fmt::Display) -> Self {
        Self { code: 1, message: message.to_string() }
    }
}

/// Configuration and input problems are usage errors; everything else that
/// happens while running is a runtime failure.
impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Format { .. } | Error::Checkpoint(_) => Self::usage(e),
            _ => Self::runtime(e),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::GenData(args) => gen_data(cli, args),
        Command::Pretrain(args) => pretrain(cli, args),
        Command::Finetune(args) => finetune(cli, args),
        Command::Eval(args) => eval(cli, args),
        Command::Sweep(args) => sweep(cli, args),
    }
}

/// Config file (or `base`), then `--override`s, then `--seed`.
fn resolve_config(cli: &Cli, base: Option<RunConfig>) -> CliResult<RunConfig> {
    let cfg = match (&cli.config, base) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(cfg)) => cfg,
        (None, None) => RunConfig::default(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    Ok(cfg.with_overrides(&overrides)?)
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    if !path.exists() {
        return Err(CliError::usage(format!("dataset {} does not exist", path.display())));
    }
    Ok(Dataset::load(path)?)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

/// Checkpoints carry their run config; an explicit `--config` wins.
fn checkpoint_config(cli: &Cli, ck: &Checkpoint) -> CliResult<RunConfig> {
    let embedded = match ck.text("run/config") {
        Ok(text) => Some(RunConfig::from_toml_str(&text)?),
        Err(_) => None,
    };
    resolve_config(cli, embedded)
}

fn dataset_path(flag: &Option<PathBuf>, cfg: &RunConfig) -> Option<PathBuf> {
    flag.clone().or_else(|| cfg.train.dataset.as_ref().map(PathBuf::from))
}

fn run_dir(cli: &Cli, cfg: &RunConfig, command: &str) -> CliResult<RunDir> {
    let root = cli.out.clone().unwrap_or_else(|| PathBuf::from(format!("runs/{command}-seed{}", cfg.seed)));
    RunDir::create(&root, cfg).map_err(|e| CliError::usage(format!("cannot create run directory {}: {e}", root.display())))
}

fn gen_data(cli: &Cli, args: &GenDataArgs) -> CliResult {
    let id: EnvId = args.env.parse()?;
    let out = cli.out.clone().ok_or_else(|| CliError::usage("gen-data needs --out <file>"))?;
    let mut cfg = resolve_config(cli, None)?;
    if cli.config.is_none() || cfg.env.id != id {
        cfg.env = EnvSpec::for_id(id);
    }
    let seed = cli.seed.unwrap_or(cfg.seed);
    let dataset = match args.kind {
        Kind::Medium => {
            if args.episodes == 0 {
                return Err(CliError::usage("--episodes must be positive"));
            }
            let env = ToyEnv::new(cfg.env.clone())?;
            Dataset::new(cfg.env.clone(), gen_medium_dataset(&env, args.episodes, args.noise, seed)?)
        }
        Kind::MediumReplay => gen_medium_replay_dataset(&cfg, args.transitions, seed)?,
    };
    dataset
        .save(&out)
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", out.display())))?;
    println!(
        "wrote {}: {} episodes, {} transitions, success rate {:.3}",
        out.display(),
        dataset.episodes.len(),
        dataset.num_transitions(),
        dataset.success_rate()
    );
    Ok(())
}

fn pretrain(cli: &Cli, args: &PretrainArgs) -> CliResult {
    let mut cfg = resolve_config(cli, None)?;
    let path = dataset_path(&args.dataset, &cfg)
        .ok_or_else(|| CliError::usage("pretrain needs --dataset or train.dataset in the config"))?;
    let dataset = load_dataset(&path)?;
    cfg.train.dataset = Some(path.display().to_string());
    let run = run_dir(cli, &cfg, "pretrain")?;
    let root = run.root().to_path_buf();
    let mut trainer = Trainer::new(&cfg, Some(&dataset), Some(run))?;
    trainer.pretrain(cfg.train.pretrain_steps)?;
    let report = trainer.evaluate(None)?;
    println!(
        "pretrained {} steps into {}; offline eval: success rate {:.3}, mean return {:.3} over {} episodes",
        cfg.train.pretrain_steps,
        root.display(),
        report.success_rate,
        report.mean_return,
        report.episodes.len()
    );
    print_checkpoint(&trainer, Stage::Pretrain);
    Ok(())
}

fn finetune(cli: &Cli, args: &FinetuneArgs) -> CliResult {
    let (mut cfg, ck) = match &args.checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            (checkpoint_config(cli, &ck)?, Some(ck))
        }
        None => (resolve_config(cli, None)?, None),
    };
    let trials = args.trials.unwrap_or(cfg.train.online_trials);
    let dataset = match dataset_path(&args.dataset, &cfg) {
        Some(path) if !args.from_scratch => {
            let data = load_dataset(&path)?;
            cfg.train.dataset = Some(path.display().to_string());
            Some(data)
        }
        _ => {
            cfg.train.dataset = None;
            None
        }
    };
    if ck.is_some() && dataset.is_none() {
        eprintln!("warning: no offline dataset; batches come from online data only");
    }
    let run = run_dir(cli, &cfg, if args.from_scratch { "online" } else { "finetune" })?;
    let root = run.root().to_path_buf();
    let (mut trainer, stage) = match &ck {
        Some(ck) => (Trainer::from_checkpoint(&cfg, ck, dataset.as_ref(), Some(run))?, Stage::Finetune),
        None => (Trainer::new(&cfg, dataset.as_ref(), Some(run))?, Stage::Online),
    };
    let records = trainer.finetune(trials, stage)?;
    for r in &records {
        println!(
            "trial {:>3}  success {}  return {:.3}  steps {:>3}  uncertainty {:.4} (max {:.4})  loss {:.4}{}",
            r.trial,
            r.success as u8,
            r.episode_return,
            r.steps,
            r.mean_uncertainty,
            r.max_uncertainty,
            r.mean_loss,
            if r.aborted { "  aborted" } else { "" }
        );
    }
    let successes = records.iter().filter(|r| r.success).count();
    println!("{} {trials} trials into {}: {successes} successes", stage.as_str(), root.display());
    print_checkpoint(&trainer, stage);
    Ok(())
}

fn print_checkpoint(trainer: &Trainer, stage: Stage) {
    if let Some(run) = trainer.run_dir() {
        let path = run.checkpoint_path(stage, trainer.updates());
        if path.exists() {
            println!("checkpoint {}", path.display());
        }
    }
}

fn eval(cli: &Cli, args: &EvalArgs) -> CliResult {
    let ck = load_checkpoint(&args.checkpoint)?;
    let cfg = checkpoint_config(cli, &ck)?;
    let trainer = Trainer::from_checkpoint(&cfg, &ck, None, None)?;
    let mut plan = cfg.planner;
    if let Some(l) = args.lambda {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(CliError::usage(format!("--lambda must be non-negative, got {l}")));
        }
        plan.lambda = l;
    }
    let n = args.episodes.unwrap_or(cfg.train.eval_episodes);
    let report = evaluate(&trainer.model, trainer.env(), n, cfg.seed, &plan)?;
    if args.verbose {
        println!("episode,seed,success,return,steps,mean_uncertainty");
        for (i, e) in report.episodes.iter().enumerate() {
            println!("{i},{},{},{},{},{}", e.seed, e.success as u8, e.episode_return, e.steps, e.mean_uncertainty);
        }
    }
    println!(
        "lambda {}  episodes {}  success rate {:.3}  mean return {:.3}",
        plan.lambda,
        report.episodes.len(),
        report.success_rate,
        report.mean_return
    );
    Ok(())
}

fn sweep(cli: &Cli, args: &SweepArgs) -> CliResult {
    let ck = load_checkpoint(&args.checkpoint)?;
    let cfg = checkpoint_config(cli, &ck)?;
    let trainer = Trainer::from_checkpoint(&cfg, &ck, None, None)?;
    if let Some(bad) = args.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(CliError::usage(format!("lambda values must be non-negative, got {bad}")));
    }
    let n = args.episodes.unwrap_or(cfg.train.eval_episodes);
    println!("{:>8}  {:>12}  {:>11}  {:>16}", "lambda", "success_rate", "mean_return", "mean_uncertainty");
    for &lambda in &args.lambdas {
        let plan = latent_mpc::planner::PlanConfig { lambda, ..cfg.planner };
        let r = evaluate(&trainer.model, trainer.env(), n, cfg.seed, &plan)?;
        let u = r.episodes.iter().map(|e| e.mean_uncertainty).sum::<f64>() / r.episodes.len() as f64;
        println!("{lambda:>8}  {:>12.3}  {:>11.3}  {u:>16.4}", r.success_rate, r.mean_return);
    }
    Ok(())
}
