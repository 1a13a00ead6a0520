use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use protocad::behavior::ActMode;
use protocad::config::RunConfig;
use protocad::env::Split;
use protocad::proto::Ablation;
use protocad::trainer::{
    eval_threads, evaluate, evaluate_grid, export_features, features_csv, grid_csv, load_models,
    Policy, Trainer,
};
use protocad::Error;

const EXIT_CHECK: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_CHECKPOINT: u8 = 3;

/// Episodes used for the random-policy reference return.
const RANDOM_BASELINE_EPISODES: usize = 20;

#[derive(Parser, Debug)]
#[command(name = "protocad", version, about = "Prototypical context-aware world model agent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an agent; resumes when --out already holds a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print a JSON summary.
    Eval(EvalArgs),
    /// Write per-step context features of eval episodes as CSV.
    ExportFeatures(ExportArgs),
    /// Run the built-in property suites.
    Check(CheckArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    ablation: Option<Ablation>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Optional run config; its task must match the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 5)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also evaluate every context of the split and write a CSV report.
    #[arg(long)]
    grid: bool,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 5)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::UnknownTask(_)) => EXIT_CONFIG,
        Some(Error::Checkpoint(_)) => EXIT_CHECKPOINT,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::ExportFeatures(a) => export(a),
        Command::Check(a) => return check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(ablation) = a.ablation {
        cfg.ablation = ablation;
    }
    cfg.validate()?;
    let mut trainer = Trainer::open(cfg, &a.out)?;
    let start = Instant::now();
    trainer.run(|t| {
        if let Some(last) = t.metrics().last() {
            eprintln!(
                "[{:>7.1}s] step {:>6}/{} updates {:>6} return {:>8.2} kl {} tcswav {}",
                start.elapsed().as_secs_f64(),
                t.env_steps,
                t.config.total_steps,
                t.updates,
                last.return_mean,
                fmt_opt(last.loss_kl),
                fmt_opt(last.loss_tcswav),
            );
        }
    })?;
    eprintln!("finished: outputs in {}", a.out.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn load_checked(checkpoint: &Path, config: Option<&Path>) -> anyhow::Result<(protocad::update::Models, RunConfig)> {
    let (models, cfg) = load_models(checkpoint)?;
    if let Some(path) = config {
        let user = RunConfig::load(path)?;
        if user.task != cfg.task {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained on `{}`, config asks for `{}`",
                cfg.task, user.task
            ))
            .into());
        }
    }
    Ok((models, cfg))
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let (models, cfg) = load_checked(&a.checkpoint, a.config.as_deref())?;
    let threads = eval_threads();
    let policy = Policy::Agent(ActMode::Eval);
    let summary = evaluate(&models, &cfg, a.split, a.episodes, a.seed, policy, threads)?;
    let random = evaluate(
        &models,
        &cfg,
        a.split,
        RANDOM_BASELINE_EPISODES,
        a.seed,
        Policy::Random,
        threads,
    )?;
    let mut report = serde_json::to_value(&summary)?;
    report["random_return_mean"] = random.return_mean.into();
    report["random_episodes"] = RANDOM_BASELINE_EPISODES.into();
    if a.grid {
        let rows = evaluate_grid(&models, &cfg, a.split, a.episodes, a.seed, policy, threads)?;
        fs::create_dir_all(&a.out)?;
        let path = a.out.join(format!("grid_{}.csv", a.split));
        fs::write(&path, grid_csv(&rows)).with_context(|| format!("writing {}", path.display()))?;
        report["grid_csv"] = path.display().to_string().into();
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn export(a: ExportArgs) -> anyhow::Result<()> {
    let (models, cfg) = load_checked(&a.checkpoint, None)?;
    let rows = export_features(&models, &cfg, a.split, a.episodes, a.seed)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join(format!("features_{}.csv", a.split));
    fs::write(&path, features_csv(cfg.task.name(), cfg.proto.d, &rows))
        .with_context(|| format!("writing {}", path.display()))?;
    println!("{} rows written to {}", rows.len(), path.display());
    Ok(())
}

fn check(a: CheckArgs) -> ExitCode {
    let report = protocad::check::run_all(a.seed);
    print!("{}", report.table());
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK)
    }
}
