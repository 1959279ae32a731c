use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::LevelFilter;
use ptde::config::{ExperimentConfig, Stage};
use ptde::harness;

/// Two-stage training and distilled decentralized execution.
///
/// Logging is controlled by PTDE_LOG (quiet, info or debug; default info).
#[derive(Parser)]
#[command(name = "ptde", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: train the learner with global information.
    Train1(RunArgs),
    /// Stage 2: build the teacher dataset and fit the local student.
    Distill(RunArgs),
    /// Evaluate the centralized policy and the decentralized executor.
    Eval(RunArgs),
    /// Run the stage named in the config's `stage` field.
    Run(RunArgs),
    /// Aggregate eval results found below the given directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Where report.csv and report.txt go (default: the first directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Seed to run; all seeds listed in the config when omitted.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn init_logging() -> Result<()> {
    let level = match std::env::var("PTDE_LOG").as_deref() {
        Err(_) | Ok("info") => LevelFilter::Info,
        Ok("quiet") => LevelFilter::Warn,
        Ok("debug") => LevelFilter::Debug,
        Ok(other) => bail!("PTDE_LOG must be quiet, info or debug, got {other:?}"),
    };
    env_logger::Builder::new().filter_level(level).format_target(false).init();
    Ok(())
}

fn run_stage(args: &RunArgs, stage: Option<Stage>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    let stage = stage.unwrap_or(cfg.stage);
    let seeds = match args.seed {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    };
    for seed in seeds {
        let verb = match stage {
            Stage::Train1 => "train1",
            Stage::Train2 => "distill",
            Stage::Eval => "eval",
        };
        harness::run(&cfg, stage, seed).with_context(|| format!("{verb} {} seed {seed}", cfg.variant))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    init_logging()?;
    match Cli::parse().command {
        Command::Train1(a) => run_stage(&a, Some(Stage::Train1)),
        Command::Distill(a) => run_stage(&a, Some(Stage::Train2)),
        Command::Eval(a) => run_stage(&a, Some(Stage::Eval)),
        Command::Run(a) => run_stage(&a, None),
        Command::Report { dirs, out } => {
            let report = harness::report(&dirs)?;
            let out = out.unwrap_or_else(|| dirs[0].clone());
            harness::write_report(&report, &out)?;
            print!("{}", report.to_text());
            Ok(())
        }
    }
}
