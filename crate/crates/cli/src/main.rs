use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use odg_cli::commands::{self, NoRuns};
use odg_cli::config::{Overrides, DATA_ROOT_ENV};
use odg_core::engine::experiment::SweepAxis;
use odg_core::engine::gradcheck::DEFAULT_STEP;

#[derive(Parser)]
#[command(
    name = "odg",
    version,
    about = "Single-source open-domain generalization experiments",
    after_help = "Relative data paths in configs are resolved against $ODG_DATA_ROOT when it is set."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic domains as PNG files with one manifest per domain.
    Generate {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = "odg-out/data")]
        out_dir: PathBuf,
    },
    /// Train a model; writes per-epoch checkpoints, the final checkpoint and the loss log.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = "odg-out/train")]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint on the configured target domains.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "odg-out/eval")]
        out_dir: PathBuf,
    },
    /// Run one ablation sweep and write its acc and hs tables.
    Ablate {
        #[command(flatten)]
        overrides: Overrides,
        /// margin-bands, noise, ssb-vs-mixstyle, fab-vs-adhoc, split-depth or known-classes.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated seeds; defaults to the config's ablation seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Number of cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long, default_value = "odg-out/ablate")]
        out_dir: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "odg-out/gradcheck")]
        out_dir: PathBuf,
    },
    /// Summarize loss logs and sweep tables under a directory, with SVG plots.
    Report {
        #[arg(long)]
        log_dir: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { overrides, out_dir } => commands::generate(&overrides.resolve()?, &out_dir),
        Command::Train { overrides, out_dir } => commands::train_cmd(&overrides.resolve()?, &out_dir),
        Command::Eval {
            overrides,
            checkpoint,
            out_dir,
        } => commands::eval_cmd(&overrides.resolve()?, &checkpoint, &out_dir),
        Command::Ablate {
            overrides,
            axis,
            seeds,
            parallel,
            out_dir,
        } => {
            let cfg = overrides.resolve()?;
            let axis = axis
                .or_else(|| cfg.ablation.axis.clone())
                .ok_or_else(|| anyhow::anyhow!("no sweep axis: pass --axis or set ablation.axis"))?;
            let axis = SweepAxis::parse(&axis)?;
            let seeds = seeds.unwrap_or_else(|| cfg.ablation.seeds.clone());
            commands::ablate(&cfg, axis, &seeds, parallel.max(1), &out_dir)
        }
        Command::Gradcheck {
            samples,
            step,
            seed,
            out_dir,
        } => commands::gradcheck_cmd(samples, step, seed, &out_dir),
        Command::Report { log_dir, out_dir } => {
            let out = out_dir.unwrap_or_else(|| log_dir.join("report"));
            commands::report(&log_dir, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    log::debug!("data root: {:?}", std::env::var_os(DATA_ROOT_ENV));
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<NoRuns>().is_some() => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
