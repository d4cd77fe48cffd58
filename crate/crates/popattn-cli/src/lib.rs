//! `popattn` — the pipeline as a single executable.
//!
//! One subcommand per stage: `prepare` labels and splits the corpus, `lda`
//! fits the topic model, `env` aggregates user environments, `train`/`eval`
//! fit and score a variant, `ablate` reproduces the variant comparison
//! table, and `cluster`/`textstats`/`attn`/`heatmap` emit analysis reports.
//!
//! Exit codes: 0 on success, 1 when inputs, flags, or artifact combinations
//! are invalid, 2 when the work itself fails. `POPATTN_THREADS` caps the
//! worker pool.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use popattn::model::Variant;

pub mod commands;
pub mod config;

pub use config::RunConfig;

/// What went wrong, split by whose fault it is: bad inputs exit 1, failures
/// during the work exit 2.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(msg) | CliError::Runtime(msg) => msg,
        }
    }
}

impl From<popattn::Error> for CliError {
    fn from(e: popattn::Error) -> CliError {
        match &e {
            popattn::Error::InvalidInput(_)
            | popattn::Error::Format { .. }
            | popattn::Error::Incompatible(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> CliError {
        CliError::Runtime(format!("json: {e}"))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "popattn",
    version,
    about = "Dual-attention popularity classification pipeline"
)]
pub struct Cli {
    /// JSON run configuration; built-in desk-scale defaults apply when absent.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Root seed for every random choice in the pipeline.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Directory all artifacts are written into.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Label posts by per-user like quartiles, split them, build the vocabulary.
    Prepare {
        /// Generate the bundled synthetic corpus instead of reading posts.
        #[arg(long)]
        synthetic: bool,
    },
    /// Fit the topic model on training captions; infer per-caption topics.
    Lda {
        /// Override the configured topic count.
        #[arg(long, value_name = "K")]
        topics: Option<usize>,
    },
    /// Aggregate per-user environment vectors from the training split.
    Env,
    /// Train a model variant; write checkpoint, metric CSV, and summary.
    Train {
        /// Model variant to train [default: dual].
        #[arg(long, value_name = "VARIANT")]
        variant: Option<Variant>,
    },
    /// Score the test split with the trained checkpoint.
    Eval,
    /// Train the six comparison variants and write the ablation table.
    Ablate,
    /// Pick-out clustering of image features by popularity ratio.
    Cluster {
        /// Override the configured pick-out threshold.
        #[arg(long, value_name = "T")]
        threshold: Option<f64>,
    },
    /// Score caption tokens by positive/negative usage.
    Textstats,
    /// Export per-word attention weights for the test split.
    Attn,
    /// Export 7x7 popularity heatmaps for the test split.
    Heatmap,
}

/// `POPATTN_THREADS` as a worker count.
fn parse_thread_cap(value: &str) -> Result<usize, CliError> {
    match value.trim().parse::<usize>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err(CliError::Validation(format!(
            "POPATTN_THREADS must be a positive integer, got {value:?}"
        ))),
    }
}

fn apply_thread_cap() -> Result<(), CliError> {
    if let Ok(value) = std::env::var("POPATTN_THREADS") {
        let threads = parse_thread_cap(&value)?;
        // A second call in one process (as in tests) leaves the first pool
        // in place; that is fine.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    Ok(())
}

/// Run one parsed invocation.
pub fn run(cli: Cli) -> Result<(), CliError> {
    apply_thread_cap()?;
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed, cli.out)?;
    match cli.command {
        Command::Prepare { synthetic } => commands::prepare(&cfg, synthetic),
        Command::Lda { topics } => commands::lda(&cfg, topics),
        Command::Env => commands::env(&cfg),
        Command::Train { variant } => {
            commands::train(&cfg, variant.unwrap_or(Variant::Dual))
        }
        Command::Eval => commands::eval(&cfg),
        Command::Ablate => commands::ablate(&cfg),
        Command::Cluster { threshold } => commands::cluster(&cfg, threshold),
        Command::Textstats => commands::textstats(&cfg),
        Command::Attn => commands::attn(&cfg),
        Command::Heatmap => commands::heatmap(&cfg),
    }
}

/// Parse arguments and run, returning the process exit code. Usage errors
/// print clap's message and exit 1; `--help`/`--version` exit 0.
pub fn run_cli(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
