use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rtrv_core::inspect::ExportFormat;

mod commands;
mod config;
mod error;

use config::{Overrides, RunConfig};
use error::CliError;

/// Learned binary routing trees for coarse-to-fine retrieval.
#[derive(Parser)]
#[command(name = "rtrv", version)]
struct Cli {
    /// Worker threads (default: all cores). 1 makes every artifact reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (JSON).
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict to one tree level.
    #[arg(long)]
    level: Option<usize>,
    /// Evaluate and search at this cutoff only.
    #[arg(long)]
    k: Option<usize>,
    /// Checkpoint to load instead of the run's final one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        RunConfig::load(&self.config, Overrides { seed: self.seed, level: self.level, k: self.k })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Dot,
}

#[derive(Subcommand)]
enum Command {
    /// Train a routing tree; writes checkpoints and the metric log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Build per-level context indexes.
    Index(Common),
    /// Search eval-split queries; writes results.jsonl.
    Search(Common),
    /// Recall, NDCG and latency per level.
    Eval(Common),
    /// Fit or train the configured baseline and evaluate it.
    Baseline(Common),
    /// Congruence analyses and subtree keywords.
    Inspect(Common),
    /// Finite-difference gradient check over every model family.
    CheckGrad {
        /// Optional run config; the report is saved under its run directory.
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export the tree with context counts and keywords.
    ExportTree {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    /// Write a synthetic corpus (stores, manifests, pairs) to a directory.
    Synth {
        /// Synthetic corpus spec (JSON).
        spec: PathBuf,
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::ConfigInvalid(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Train { common, resume } => commands::cmd_train(&common.load()?, resume.as_deref()),
        Command::Index(c) => commands::cmd_index(&c.load()?, c.checkpoint.as_deref()),
        Command::Search(c) => commands::cmd_search(&c.load()?, c.checkpoint.as_deref()),
        Command::Eval(c) => commands::cmd_eval(&c.load()?, c.checkpoint.as_deref()),
        Command::Baseline(c) => commands::cmd_baseline(&c.load()?),
        Command::Inspect(c) => commands::cmd_inspect(&c.load()?, c.checkpoint.as_deref()),
        Command::CheckGrad { config, seed } => {
            let overrides = Overrides { seed, ..Default::default() };
            let cfg = config.map(|p| RunConfig::load(&p, overrides)).transpose()?;
            commands::cmd_check_grad(cfg.as_ref(), seed.unwrap_or(0))
        }
        Command::ExportTree { common, format } => {
            let format = format.map(|f| match f {
                Format::Json => ExportFormat::Json,
                Format::Dot => ExportFormat::Dot,
            });
            commands::cmd_export_tree(&common.load()?, common.checkpoint.as_deref(), format)
        }
        Command::Synth { spec, out } => commands::cmd_synth(&spec, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RTRV_LOG", "info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
