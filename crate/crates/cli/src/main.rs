//! `stepmask` command-line driver: corpus generation, benchmark synthesis,
//! pre-training, fine-tuning, evaluation, gradient checks and reports.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stepmask::benchmarks::TaskKind;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] stepmask::Error),
    #[error("gradient check failed: max relative error {0:.3e} exceeds 1e-5")]
    GradCheck(f64),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(stepmask::Error::Divergence { .. } | stepmask::Error::Synthesis(_)) => 2,
            CliError::GradCheck(_) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stepmask", version, about = "Masked step modeling over synthetic instructional videos")]
struct Cli {
    /// Override the global seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one config key, e.g. `--set pretrain.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenCorpus {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `paths.corpus_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize downstream benchmark files from a corpus.
    GenBenchmarks {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated task kinds; defaults to `benchmarks.kinds`.
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<TaskKind>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Masked step pre-training on the training split.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fine-tune a checkpoint on one downstream task.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: TaskKind,
    },
    /// Evaluate a checkpoint on a benchmark file.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        benchmark: PathBuf,
        /// Split name recorded in the report.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference gradient check of both pre-training losses.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Aggregate evaluation reports into one table.
    Report {
        #[arg(long)]
        reports: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let load = |path: &PathBuf| config::RunConfig::load(path, &cli.overrides, cli.seed);
    match &cli.command {
        Command::GenCorpus { config, out } => commands::gen_corpus(&load(config)?, out.as_deref()),
        Command::GenBenchmarks { config, kinds, out } => {
            commands::gen_benchmarks(&load(config)?, kinds, out.as_deref())
        }
        Command::Pretrain { config } => commands::pretrain(&load(config)?),
        Command::Finetune {
            config,
            checkpoint,
            task,
        } => commands::finetune(&load(config)?, checkpoint, *task),
        Command::Eval {
            config,
            checkpoint,
            benchmark,
            split,
        } => commands::eval(&load(config)?, checkpoint, benchmark, split),
        Command::Gradcheck { config } => commands::gradcheck(&load(config)?),
        Command::Report { reports } => commands::report(reports),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
