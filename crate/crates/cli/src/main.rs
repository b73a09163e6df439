mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::{CliConfig, OutputSpec};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<trajfed_core::fpo::FpoError> for CliError {
    fn from(e: trajfed_core::fpo::FpoError) -> Self {
        match e {
            trajfed_core::fpo::FpoError::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "trajfed", version, about = "Federated trajectory data preparation simulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML configuration file (defaults apply when omitted).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed (overrides `run.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print JSON instead of text tables.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic data set and write it as CSV.
    GenData,
    /// Run federated training and write the report and checkpoints.
    Train,
    /// Evaluate saved checkpoints on the held-out split.
    Eval {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated tasks to evaluate (default: all configured).
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
    },
    /// Check masked aggregation against plain averaging.
    AggDemo {
        #[arg(long, default_value_t = 3)]
        clients: usize,
        #[arg(long, default_value_t = 100)]
        len: usize,
    },
    /// Compare sampled layer-selection frequencies with the closed form.
    SelectDemo {
        /// Number of layers.
        #[arg(long, default_value_t = 3)]
        n: usize,
        /// Layers drawn per trial.
        #[arg(long, default_value_t = 2)]
        nm: usize,
        /// Comma-separated change ratios, one per layer.
        #[arg(long, default_value = "0.2,0.3,0.5")]
        ratios: String,
        #[arg(long, default_value_t = 200_000)]
        trials: usize,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
    /// Summarize a run report.
    Report {
        /// Report file (default: <out>/report.json).
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = cli.common;
    let result = match cli.command {
        Command::GenData => commands::gen_data(&common),
        Command::Train => commands::train(&common),
        Command::Eval { checkpoint, tasks } => commands::eval(&common, checkpoint, &tasks),
        Command::AggDemo { clients, len } => commands::agg_demo(&common, clients, len),
        Command::SelectDemo { n, nm, ratios, trials } => commands::select_demo(&common, n, nm, &ratios, trials),
        Command::DefaultConfig => {
            print!("{}", CliConfig::default().to_toml());
            Ok(())
        }
        Command::Report { input } => commands::report(&common, input),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
