//! `fedsim`: generate datasets, run federated experiments, compare runs and
//! analyse representations.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use fedsim::analysis::LayerLevel;

use config::{extract_overrides, CommonArgs, Override};

#[derive(Debug, Parser)]
#[command(name = "fedsim", version, about = "Federated fine-tuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the source and target datasets.
    Generate(CommonArgs),
    /// Run one experiment and write reports, checkpoints and a manifest.
    Run(CommonArgs),
    /// Summarise finished runs side by side.
    Compare {
        /// Run output directories.
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        /// Accuracy for rounds-to-threshold; defaults to the first run's setting.
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write comparison.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pairwise CKA of client models after one round, or of given checkpoints.
    AnalyzeCka {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoints to compare instead of running a round.
        #[arg(long, num_args = 1..)]
        models: Vec<PathBuf>,
        /// Layer levels (low, mid, up); all by default.
        #[arg(long, num_args = 1..)]
        level: Vec<LayerLevel>,
    },
    /// Histogram of per-sample entropies on the client training data.
    EntropyHist {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to score with; defaults to the pretrained global model.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

fn execute(cli: Cli, overrides: &[Override]) -> Result<()> {
    match cli.command {
        Command::Generate(common) => commands::generate(&common.resolve(overrides)?),
        Command::Run(common) => commands::run(&common.resolve(overrides)?),
        Command::Compare {
            runs,
            threshold,
            out,
        } => {
            if !overrides.is_empty() {
                bail!("compare takes no config overrides");
            }
            commands::compare(&runs, threshold, out.as_deref())
        }
        Command::AnalyzeCka {
            common,
            models,
            level,
        } => {
            let levels = if level.is_empty() {
                LayerLevel::ALL.to_vec()
            } else {
                level
            };
            commands::analyze_cka(&common.resolve(overrides)?, &models, &levels)
        }
        Command::EntropyHist { common, model } => {
            commands::entropy_hist(&common.resolve(overrides)?, model.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDSIM_LOG", "warn")).init();
    let result = extract_overrides(std::env::args().collect()).and_then(|(args, overrides)| {
        let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
        execute(cli, &overrides)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // error sources already quote their causes; skip repeats
            let mut message = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !message.contains(&c) {
                    message.push_str(": ");
                    message.push_str(&c);
                }
            }
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
