//! `factcheck`: ingest, retrieve, train, evaluate and inspect claim/document
//! datasets.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use factcheck_core::corpus::{Format, Split};
use factcheck_core::eda::DEFAULT_BINS;

#[derive(Parser)]
#[command(name = "factcheck", version, about = "Multimodal claim verification with evidence retrieval")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Preset name or path to an experiment TOML file.
    #[arg(long, global = true, default_value = "SBERT-QA_sentence_ER_top5")]
    pub config: String,
    /// Seed for initialisation, shuffling, dropout and synthetic data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Where artifacts go. Defaults to runs/<experiment name>.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Format of dataset files this command writes.
    #[arg(long, global = true, default_value = "csv")]
    pub format: Format,
    /// Worker threads. 1 is the bit-reproducible reference mode.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Override a config value, e.g. --set train.max_epochs=10.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Load a dataset, drop scraping-error documents and write the rest.
    Ingest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Write the evidence snippet chosen for every pair.
    Retrieve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Train a model; writes history, checkpoints and the resolved config.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
    },
    /// Predict labels with a trained run.
    Predict {
        #[arg(long)]
        data: PathBuf,
        /// Defaults to <run-dir>/checkpoints/best.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score predictions against gold labels.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Existing predictions; when absent they are computed from the run.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Text length and cross-modal similarity statistics per category.
    Eda {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
    },
    /// Generate a labelled synthetic corpus with its image store.
    Synth {
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        #[arg(long, default_value_t = 50)]
        val_pairs: usize,
        /// Scraping-error rows to plant in the training split.
        #[arg(long, default_value_t = 0)]
        invalid: usize,
    },
    /// List the bundled experiment presets.
    Presets,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let c = &cli.common;
    match cli.command {
        Command::Ingest { data, split } => commands::ingest(c, &data, split),
        Command::Retrieve { data, split } => commands::retrieve(c, &data, split),
        Command::Train { train, val } => commands::train(c, &train, &val),
        Command::Predict { data, checkpoint } => commands::predict(c, &data, checkpoint.as_deref()).map(|_| ()),
        Command::Eval {
            data,
            predictions,
            checkpoint,
        } => commands::eval(c, &data, predictions.as_deref(), checkpoint.as_deref()),
        Command::Eda { data, bins } => commands::eda(c, &data, bins),
        Command::Synth {
            pairs,
            val_pairs,
            invalid,
        } => commands::synth(c, pairs, val_pairs, invalid),
        Command::Presets => {
            for name in factcheck_core::experiment::preset_names() {
                println!("{name}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
