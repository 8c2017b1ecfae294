mod commands;
mod failure;
mod run_manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Common, EvalArgs, PredictArgs, TrainArgs};

/// Weakly-supervised audio-visual event localization.
#[derive(Parser, Debug)]
#[command(name = "clasp", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with train/val/test manifests.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a manifest.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Write detections and anchor positions for a manifest.
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: PredictArgs,
    },
    /// Score detections against a manifest's ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: EvalArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    let result = match &cli.command {
        Command::Gen { common } => commands::gen(common),
        Command::Train { common, args } => commands::train(common, args),
        Command::Predict { common, args } => commands::predict(common, args),
        Command::Eval { common, args } => commands::eval(common, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("clasp: {e}");
            ExitCode::from(e.code())
        }
    }
}
