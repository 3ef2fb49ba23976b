//! Command line front end: dataset generation, training, checkpoint
//! evaluation, and report rendering.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use clang_vqa::data::{generate_dataset, DatasetSpec};
use clang_vqa::train::{self, render_csv, MetricsLog, ReportFormat, Split, TrainConfig};
use clang_vqa::Result;

#[derive(Parser)]
#[command(name = "clang-vqa", version, about = "Event graph video QA on synthetic benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and val splits of the synthetic event QA benchmark.
    GenData {
        /// Dataset spec, a JSON file; `{}` asks for the standard benchmark.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for the manifest and blob files.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a generated dataset and write checkpoint plus reports.
    Train {
        /// Hyperparameters, a JSON file; missing fields take defaults.
        #[arg(long)]
        config: PathBuf,
        /// Directory holding train.manifest.jsonl and val.manifest.jsonl.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint.clgc, metrics.json, and reports.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one split and print the metrics row.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = Split::from_str)]
        split: Split,
    },
    /// Re-render reports from a saved metrics log.
    Report {
        /// A metrics.json written by `train`.
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma separated subset of: csv, svg.
        #[arg(long, default_value = "csv,svg")]
        format: String,
    },
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { spec, out, seed } => {
            let spec: DatasetSpec = serde_json::from_str(&fs::read_to_string(&spec)?)?;
            let (train_path, val_path) = generate_dataset(&spec, seed, &out)?;
            println!("wrote {}", train_path.display());
            println!("wrote {}", val_path.display());
        }
        Command::Train {
            config,
            data,
            out,
            seed,
        } => {
            let mut cfg: TrainConfig = serde_json::from_str(&fs::read_to_string(&config)?)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let outcome = train::train(&cfg, &data, Some(&out))?;
            print!("{}", render_csv(&outcome.log));
            println!("best val accuracy {:.4}", outcome.best_val_acc);
            if let Some(path) = &outcome.checkpoint {
                println!("wrote {}", path.display());
            }
        }
        Command::Eval {
            checkpoint,
            data,
            split,
        } => {
            let row = train::evaluate(&checkpoint, &data, split)?;
            print!("{}", render_csv(&MetricsLog { rows: vec![row] }));
        }
        Command::Report { log, out, format } => {
            let log: MetricsLog = serde_json::from_str(&fs::read_to_string(&log)?)?;
            let formats = format
                .split(',')
                .map(|part| part.parse::<ReportFormat>())
                .collect::<Result<Vec<_>>>()?;
            for path in train::emit_report(&log, &out, &formats)? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
