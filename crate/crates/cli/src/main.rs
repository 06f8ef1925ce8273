//! `csca`: generate data, train, evaluate and analyse CSCA models.
//!
//! Exit status: 0 success, 1 a check did not pass, 2 usage error, 3 config
//! error, 4 IO or file-format error, 5 contract violation.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "csca", version, about = "Cascaded self- and co-attention VQA experiments")]
struct Cli {
    /// Run configuration (TOML, schema csca-config-v1). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train and eval datasets.
    GenData,
    /// Train a model and write its checkpoint and history.
    Train {
        /// Continue from the configured checkpoint if it exists.
        #[arg(long)]
        resume: bool,
        /// Save a checkpoint every N mini-batches (default: every epoch).
        #[arg(long)]
        save_every: Option<usize>,
        /// Stop after N mini-batches in this invocation.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Evaluate the checkpoint on the eval set, or score prediction records.
    Eval {
        /// Score this prediction-record file instead of running the model.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Train every attention variant from the same seeds and tabulate.
    Ablate,
    /// Train one model per cascade depth and tabulate.
    SweepBlocks {
        /// Comma-separated block counts, overriding the config.
        #[arg(long, value_delimiter = ',')]
        blocks: Option<Vec<usize>>,
    },
    /// Finite-difference check of the full model's gradients on the tiny config.
    Gradcheck {
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Write final-block attention weights and the top regions and word.
    DumpAttention {
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Convert between binary files and their text forms, chosen by
    /// extension: .ds <-> .jsonl for datasets, .ck <-> .json for checkpoints.
    Convert { input: PathBuf, output: PathBuf },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train {
            resume,
            save_every,
            max_steps,
        } => commands::train(&cfg, resume, save_every, max_steps),
        Command::Eval { records } => commands::eval(&cfg, records.as_deref()),
        Command::Ablate => commands::ablate(&cfg),
        Command::SweepBlocks { blocks } => commands::sweep_blocks(&cfg, blocks),
        Command::Gradcheck { seeds } => commands::gradcheck(&cfg, seeds),
        Command::DumpAttention { samples, top_k } => commands::dump_attention(&cfg, samples, top_k),
        Command::Convert { input, output } => commands::convert(&cfg, &input, &output),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                CliError::Usage(String::new()).exit_code()
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("csca: {e}");
            e.exit_code()
        }
    }
}
