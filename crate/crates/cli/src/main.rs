//! `hvdc`: simulation, linearization and tuning runs of the point-to-point
//! VSC-HVDC system from the command line.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hvdc_core::harness::HarnessError;
use hvdc_core::linear::LinearError;
use hvdc_core::params::ConfigError;
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(
    name = "hvdc",
    version,
    about = "Model-predictive current control of a point-to-point VSC-HVDC link",
    after_help = "Options marked [env: ...] read that variable when the flag is absent.\n\
                  Exit codes: 0 ok, 2 usage, 3 configuration, 4 scenario, 5 simulation aborted,\n\
                  6 linear analysis, 7 output."
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// System configuration (TOML); the built-in reference system when absent
    #[arg(long, global = true, env = "HVDC_CONFIG", value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory for CSV files and manifest.json; CSV goes to stdout when absent
    #[arg(long, global = true, env = "HVDC_OUT", value_name = "DIR")]
    out: Option<PathBuf>,
    /// MPC sample time in seconds
    #[arg(long, global = true, env = "HVDC_TS", value_name = "SECONDS")]
    ts: Option<f64>,
    /// MPC prediction horizon in samples
    #[arg(long, global = true, env = "HVDC_HORIZON", value_name = "N")]
    horizon: Option<usize>,
    /// MPC control horizon in samples
    #[arg(long, global = true, env = "HVDC_CONTROL_HORIZON", value_name = "N")]
    control_horizon: Option<usize>,
    /// MPC tracking weight in [0, 1]
    #[arg(long, global = true, env = "HVDC_WEIGHT", value_name = "W")]
    weight: Option<f64>,
    /// Run batches on the calling thread instead of the thread pool
    #[arg(long, global = true, env = "HVDC_SEQUENTIAL")]
    sequential: bool,
    /// More log output (repeatable)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a scenario file, or the step scenario when none is given
    Simulate {
        /// Scenario (TOML) with duration, initial references and events
        #[arg(long, env = "HVDC_SCENARIO", value_name = "PATH")]
        scenario: Option<PathBuf>,
        /// Use the long step scenario when no scenario file is given
        #[arg(long, env = "HVDC_LONG_SCENARIO")]
        long_scenario: bool,
    },
    /// Print the small-signal model of the MPC station at its initial operating point
    Linearize,
    /// Frequency response of the current transfer matrix on a log-spaced grid
    Bode {
        /// Lowest frequency in Hz
        #[arg(long, default_value_t = 0.1, value_name = "HZ")]
        f_min: f64,
        /// Highest frequency in Hz
        #[arg(long, default_value_t = 1e5, value_name = "HZ")]
        f_max: f64,
        /// Number of grid points
        #[arg(long, default_value_t = 200, value_name = "N")]
        points: usize,
    },
    /// Step response metrics for a list of tracking weights
    TuneSweep {
        /// Comma-separated tracking weights
        #[arg(long, env = "HVDC_WEIGHTS", value_delimiter = ',', default_value = "0.4,0.6,0.9", value_name = "LIST")]
        weights: Vec<f64>,
        /// Use the long step scenario
        #[arg(long, env = "HVDC_LONG_SCENARIO")]
        long_scenario: bool,
    },
    /// Run the built-in current-reference step scenario
    Step {
        /// Use the long step scenario
        #[arg(long, env = "HVDC_LONG_SCENARIO")]
        long_scenario: bool,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("scenario {path}: {reason}")]
    Scenario { path: String, reason: String },
    #[error(transparent)]
    Simulation(HarnessError),
    #[error("linear analysis: {0}")]
    Linear(#[from] LinearError),
    #[error("cannot write {path}: {source}")]
    Output {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(c) => CliError::Config(c),
            HarnessError::Linear(l) => CliError::Linear(l),
            other => CliError::Simulation(other),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Scenario { .. } => 4,
            CliError::Simulation(_) => 5,
            CliError::Linear(_) => 6,
            CliError::Output { .. } => 7,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_env("HVDC_LOG").init();

    match commands::run(&cli.common, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hvdc: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
