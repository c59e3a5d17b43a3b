//! `ebdreg`: generate synthetic corpora, inspect token labels, train,
//! evaluate and produce analysis reports.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "ebdreg", version, about = "Explanation-guided bias decoupling for NLI")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (or file, for `label` with a `.json` name).
    #[arg(long, default_value = "ebdreg-out")]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dotted `key=value` override; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Checkpoint to load; defaults to the config's checkpoint path, then
    /// `<out>/checkpoint.json`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset to score; defaults to the config's eval split.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write train/dev/ood splits of the synthetic biased corpus.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Dump per-token labels, targets and masks for a dataset.
    Label {
        #[command(flatten)]
        common: Common,
        /// Dataset; defaults to the config's train split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training set; defaults to the config's train split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Accuracy and token-level F1.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Accuracy under synonym substitution of one word category.
    SwapEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Synonym lexicon; defaults to the config's lexicon.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// bias, keyword-intersect or keyword-distinct.
        #[arg(long)]
        category: Option<String>,
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// `[CLS]` attention per block with keyword/bias mass.
    AttnReport {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated 1-based blocks; defaults to the supervised set.
        #[arg(long, value_delimiter = ',')]
        blocks: Vec<usize>,
    },
    /// Keyword-only and bias-only sub-inference predictions.
    SubReport {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Block to read; defaults to the topmost supervised block.
        #[arg(long)]
        block: Option<usize>,
    },
    /// Finite-difference check of every loss term on a small model.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(commands::Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
