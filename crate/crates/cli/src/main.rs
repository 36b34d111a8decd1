mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ttt4rec_core::data::{LogFormat, DEFAULT_MIN_INTERACTIONS};

use crate::config::Overrides;

#[derive(Parser)]
#[command(
    name = "ttt4rec",
    version,
    about = "Sequential recommendation with test-time training layers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Movielens,
    Amazon,
}

impl From<FormatArg> for LogFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Movielens => LogFormat::Movielens,
            FormatArg::Amazon => LogFormat::Amazon,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse a raw interaction log and write a dataset cache.
    Ingest {
        #[arg(long, value_enum)]
        format: FormatArg,
        #[arg(long)]
        input: PathBuf,
        /// Cache file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MIN_INTERACTIONS)]
        min_interactions: usize,
        /// Defaults to 200 for movielens and 50 for amazon.
        #[arg(long)]
        max_seq_len: Option<usize>,
    },
    /// Train a model; writes a self-describing run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on a dataset's held-out items.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset cache; taken from `--config` when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Run config supplying the dataset and seed.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for `eval.json` and `eval.csv`; defaults to the
        /// checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every (initializer range, mini-batch size) cell.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest {
            format,
            input,
            out,
            min_interactions,
            max_seq_len,
        } => commands::ingest(format.into(), &input, &out, min_interactions, max_seq_len),
        Command::Train { config, overrides } => commands::train(&config, &overrides),
        Command::Eval {
            checkpoint,
            dataset,
            config,
            seed,
            out,
        } => commands::eval(&checkpoint, dataset, config, seed, out),
        Command::Grid { config, overrides } => commands::grid(&config, &overrides),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
