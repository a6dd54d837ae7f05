use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use setsum_cli::{run, Command, Options};

#[derive(Parser)]
#[command(
    name = "setsum",
    version,
    about = "Set-sum augmentation for counting and volume regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic blob dataset and its manifest.
    Generate { config: PathBuf },
    /// Train a regressor on the manifest's train split.
    Train { config: PathBuf },
    /// Predict on a split and write predictions and metrics.
    Eval {
        config: PathBuf,
        /// Model file (default: <output_dir>/model.ssrm).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run the learning-curve experiment.
    Curve {
        config: PathBuf,
        /// Worker threads; outputs do not depend on it.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut options = Options {
        seed: cli.seed,
        ..Options::default()
    };
    let (command, config) = match cli.command {
        Cmd::Generate { config } => (Command::Generate, config),
        Cmd::Train { config } => (Command::Train, config),
        Cmd::Eval { config, model } => {
            options.model = model;
            (Command::Eval, config)
        }
        Cmd::Curve { config, jobs } => {
            options.jobs = Some(jobs);
            (Command::Curve, config)
        }
    };
    match run(command, &config, &options, &mut std::io::stdout()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
