use clap::{Parser, Subcommand};
use dendrite::io::config::ExperimentConfig;
use dendrite::io::experiment::{evaluate_checkpoint, run_experiment};
use dendrite::io::idx::{self, IMAGES_MAGIC, LABELS_MAGIC};
use std::path::PathBuf;
use std::process::ExitCode;

/// Neuron-centric network training on a simulated parameter-server cluster.
#[derive(Parser)]
#[command(name = "dendrite", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training experiment described by a config file.
    Train {
        /// Path to the experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Force deterministic scheduling regardless of the config.
        #[arg(long)]
        deterministic: bool,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report a checkpoint's accuracy on a test set.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test_images: PathBuf,
        #[arg(long)]
        test_labels: PathBuf,
    },
    /// Print the header fields of an IDX file.
    InspectIdx {
        path: PathBuf,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<(), String> {
    match Cli::parse().command {
        Command::Train {
            config,
            deterministic,
            seed,
            out,
        } => {
            let mut config = ExperimentConfig::load(&config).map_err(|e| e.to_string())?;
            if deterministic {
                config.deterministic = true;
            }
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(out) = out {
                config.output_dir = out;
            }
            run_experiment(&config).map_err(|e| e.to_string())?;
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            test_images,
            test_labels,
        } => {
            let accuracy = evaluate_checkpoint(&checkpoint, &test_images, &test_labels)
                .map_err(|e| e.to_string())?;
            println!("accuracy={accuracy}");
            Ok(())
        }
        Command::InspectIdx { path } => {
            let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
            let header = idx::read_header(&bytes).map_err(|e| e.to_string())?;
            let kind = match header.magic {
                IMAGES_MAGIC => "images",
                LABELS_MAGIC => "labels",
                _ => "unknown",
            };
            print!(
                "magic={:#010x} kind={} count={}",
                header.magic, kind, header.count
            );
            match header.dims.as_slice() {
                [rows, cols] => println!(" rows={rows} cols={cols}"),
                _ => println!(),
            }
            Ok(())
        }
    }
}
