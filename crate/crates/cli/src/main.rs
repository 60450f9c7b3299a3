mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tgnn::catalog::{CatalogError, PcaError};
use tgnn::config::ConfigError;
use tgnn::eval::{EvalError, Task};
use tgnn::graph::GraphError;
use tgnn::model::ModelError;
use tgnn::synth::SynthError;
use tgnn::training::TrainingError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Pca(#[from] PcaError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Stable machine-readable class printed before the message.
    pub fn class(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Config(_) => "config",
            CliError::Catalog(_) => "catalog",
            CliError::Pca(_) => "pca",
            CliError::Graph(_) => "graph",
            CliError::Model(_) => "model",
            CliError::Training(_) => "training",
            CliError::Eval(_) => "eval",
            CliError::Synth(_) => "synth",
            CliError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "tgnn", version, about = "Graph transformer outfit generation pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// RNG seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// key = value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Extra config entry, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Sip,
    Fitb,
    Cp,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Sip => Task::Sip,
            TaskArg::Fitb => Task::Fitb,
            TaskArg::Cp => Task::Cp,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct CatalogArgs {
    #[arg(long)]
    pub outfits: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic catalog, its oracle and a train/val/test split.
    Synth {
        /// Train and validation fractions; the rest is test.
        #[arg(long, default_value = "0.8,0.1", value_delimiter = ',')]
        split: Vec<f64>,
        /// Drop outfits sharing garments across splits.
        #[arg(long)]
        disjoint: bool,
    },
    /// Validate a catalog and write it back in canonical form.
    Ingest {
        #[command(flatten)]
        catalog: CatalogArgs,
    },
    /// Fit (or apply) PCA and write projected embeddings.
    Pca {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value_t = 128)]
        dim: usize,
        /// Apply this fitted model instead of fitting a new one.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Item relation graph statistics.
    GraphStats {
        #[command(flatten)]
        catalog: CatalogArgs,
    },
    /// Partition the outfit relation graph.
    Partition {
        #[command(flatten)]
        catalog: CatalogArgs,
        /// Target outfits per partition.
        #[arg(long, default_value_t = 50)]
        phi: usize,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        catalog: CatalogArgs,
        /// Validation outfits (same embeddings file).
        #[arg(long)]
        val_outfits: Option<PathBuf>,
        /// Partition file from `partition`; computed when absent.
        #[arg(long)]
        partitions: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        phi: usize,
        /// Write the initialized model without training.
        #[arg(long)]
        init_only: bool,
    },
    /// Evaluate a model on held-out outfits.
    Eval {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        model: PathBuf,
        /// Training outfits the partitions refer to.
        #[arg(long)]
        train_outfits: PathBuf,
        #[arg(long)]
        test_outfits: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        partitions: PathBuf,
        /// FITB questions; one per test outfit is generated when absent.
        #[arg(long)]
        fitb_queries: Option<PathBuf>,
        /// Garments given before the first SIP step.
        #[arg(long, default_value_t = 1)]
        seed_len: usize,
        /// Skip the SIP stop-token step.
        #[arg(long)]
        no_stop: bool,
        #[arg(long, default_value_t = 3)]
        cp_distractors: usize,
        /// Also write every scored episode.
        #[arg(long)]
        episodes: bool,
    },
    /// Generate an outfit from seed garments.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        catalog: CatalogArgs,
        #[arg(long)]
        partitions: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seed_ids: Vec<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Ingest { .. } => "ingest",
            Command::Pca { .. } => "pca",
            Command::GraphStats { .. } => "graph-stats",
            Command::Partition { .. } => "partition",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Generate { .. } => "generate",
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error[usage]: {}", one_line(&e.to_string()));
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
