//! `robex`: synthesize data, train ERM/AT models, evaluate robustness
//! curves, report per-outcome metrics and render contrastive explanations.
//!
//! Exit codes: 0 ok, 2 config, 3 training, 4 missing artifact, 5 I/O.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use robex_cli::commands;
use robex_cli::config::{Overrides, RunConfig};
use robex_cli::error::CliError;

#[derive(Parser)]
#[command(name = "robex", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file, or a manifest.json written by an earlier command.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed; overrides the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; overrides the file.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Clone)]
struct Runs {
    /// Training run directory (repeatable); overrides `runs` in the file.
    #[arg(long = "run")]
    runs: Vec<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset as PNG frames.
    Synth(Common),
    /// Train one model per fold and keep the best checkpoint of each.
    Train(Common),
    /// Evaluate adversarial accuracy over the epsilon grid and plot it.
    Curve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        runs: Runs,
    },
    /// Per-outcome recall and AUROC table.
    Report {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        runs: Runs,
    },
    /// Render contrastive explanations for test samples of one fold.
    Explain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        runs: Runs,
        /// Explain only misclassified samples.
        #[arg(long)]
        only_errors: bool,
    },
}

fn resolve(common: &Common, overrides: Overrides) -> Result<RunConfig, CliError> {
    let base = match &common.config {
        Some(path) if !path.is_file() => return Err(CliError::Missing(path.clone())),
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    base.resolve(&Overrides {
        seed: common.seed,
        jobs: common.jobs,
        ..overrides
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(c) => commands::synth(&resolve(&c, Overrides::default())?, &c.out),
        Command::Train(c) => commands::train_runs(&resolve(&c, Overrides::default())?, &c.out),
        Command::Curve { common, runs } => {
            let overrides = Overrides {
                runs: runs.runs,
                ..Overrides::default()
            };
            commands::curve(&resolve(&common, overrides)?, &common.out)
        }
        Command::Report { common, runs } => {
            let overrides = Overrides {
                runs: runs.runs,
                ..Overrides::default()
            };
            let table = commands::report(&resolve(&common, overrides)?, &common.out)?;
            print!("{table}");
            Ok(())
        }
        Command::Explain {
            common,
            runs,
            only_errors,
        } => {
            let overrides = Overrides {
                runs: runs.runs,
                only_errors,
                ..Overrides::default()
            };
            commands::explain(&resolve(&common, overrides)?, &common.out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
