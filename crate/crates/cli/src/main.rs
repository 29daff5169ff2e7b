//! `devchain` command-line front end.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use devchain::{ChainDirection, DecisionMode};

use crate::config::{FileConfig, Overrides};
use crate::error::{CliError, CliResult, EXIT_USAGE};

#[derive(Parser, Debug)]
#[command(name = "devchain", version, about = "Greedy re-use chains of reversible stage transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw train, estimator and validation splits from the [synth] process.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "data")]
        out_dir: PathBuf,
    },
    /// Fit the age estimator, run the greedy chain and write all reports.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Score a saved chain on a validation stage directory.
    Eval {
        /// Chain file written by `run`.
        #[arg(long)]
        chain: PathBuf,
        /// Directory of stage_*.csv files.
        #[arg(long)]
        validation: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Print a saved chain's descriptor and decision log.
    Inspect {
        chain: PathBuf,
        /// Also verify every digest recorded in this manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (at most 2^63 - 1).
    #[arg(long, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    seed: Option<u64>,
    /// Re-use tolerance; `inf` always re-uses.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Training steps per call.
    #[arg(long)]
    steps: Option<usize>,
    /// one_sided or two_sided.
    #[arg(long)]
    decision_mode: Option<DecisionMode>,
    /// forward or backward.
    #[arg(long)]
    direction: Option<ChainDirection>,
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    #[arg(long)]
    max_forgetting_error: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> CliResult<FileConfig> {
        let mut cfg = match &self.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            epsilon: self.epsilon,
            steps: self.steps,
            decision_mode: self.decision_mode,
            direction: self.direction,
            checkpoint_interval: self.checkpoint_interval,
            max_forgetting_error: self.max_forgetting_error,
        });
        cfg.run.validate()?;
        Ok(cfg)
    }
}

fn dispatch(command: Command) -> CliResult<String> {
    match command {
        Command::Generate { config, out_dir } => {
            let cfg = config.resolve()?;
            commands::generate(&cfg, config.config.as_deref(), &out_dir)
        }
        Command::Run { config, out_dir } => {
            let cfg = config.resolve()?;
            commands::run(&cfg, config.config.as_deref(), &out_dir)
        }
        Command::Eval {
            chain,
            validation,
            out_dir,
        } => commands::eval(&chain, &validation, &out_dir),
        Command::Inspect { chain, manifest } => commands::inspect(&chain, manifest.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(CliError::exit_code(&e) as u8)
        }
    }
}
