//! Command-line harness for ergodic inference experiments.
//!
//! Experiments are described by a strict TOML file ([`config`]) and produce
//! a JSON report ([`report`]) whose content lives under the `report` key.
//!
//! Exit codes: 0 success, 1 invariant check failed, 2 invalid config or
//! usage, 3 training or run failure, 4 thresholds failed under `--strict`,
//! 5 output not writable. Failures print a one-line JSON record on stderr.

pub mod commands;
pub mod config;
pub mod csv;
pub mod error;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::Options;
use crate::config::ExperimentConfig;
pub use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "ergodic",
    version,
    about = "Train and evaluate deep ergodic inference networks"
)]
pub struct Cli {
    /// Master seed; overrides `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Exit with code 4 when configured thresholds are not met.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Report path (CSV path for `sample`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train, sample and diagnose as described by a config file.
    Run { config: PathBuf },
    /// Run the fast invariant suite.
    Check,
    /// Draw samples from the model stored in a run report.
    Sample {
        report: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Run a reference method on the configured target.
    Baseline {
        #[arg(value_enum)]
        method: BaselineMethod,
        config: PathBuf,
    },
    /// Train one model per depth and compare final objectives.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4])]
        depths: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineMethod {
    Hmc,
    Vi,
    Amcmc,
}

impl BaselineMethod {
    fn name(self) -> &'static str {
        match self {
            Self::Hmc => "hmc",
            Self::Vi => "vi",
            Self::Amcmc => "amcmc",
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let opts = Options {
        seed: cli.seed,
        strict: cli.strict,
        out: cli.out,
    };
    match cli.command {
        Command::Run { config } => commands::run(ExperimentConfig::load(&config)?, &opts).map(drop),
        Command::Check => commands::check(&opts, None).map(drop),
        Command::Sample { report, n } => commands::sample(&report, n, &opts),
        Command::Baseline { method, config } => {
            commands::baseline(method.name(), ExperimentConfig::load(&config)?, &opts).map(drop)
        }
        Command::Sweep { config, depths } => {
            commands::sweep(ExperimentConfig::load(&config)?, &depths, &opts).map(drop)
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn execute<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let err = CliError::Usage(e.kind().to_string());
            eprint!("{e}");
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
