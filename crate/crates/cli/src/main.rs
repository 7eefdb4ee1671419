//! `transmotion`: data conversion, training, evaluation and navigation runs.
//!
//! Exit codes: 0 success, 1 invalid configuration or failed run, 2 usage error.

mod commands;
mod config;
mod convert;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Common, EvalArgs, Run, TrainFlags};
use config::{Invalid, PredictorKind};

#[derive(Parser)]
#[command(name = "transmotion", version, about = "Multimodal human motion prediction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert native-layout scene files to canonical NDJSON.
    Convert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Vec<PathBuf>,
        #[arg(long, default_value = "converted")]
        dataset: String,
        #[arg(long, default_value = "train")]
        split: String,
        /// Resample every scene to this frame rate.
        #[arg(long)]
        to_fps: Option<f64>,
    },
    /// Generate synthetic scenes.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 64)]
        scenes: usize,
        #[arg(long, default_value = "synth")]
        dataset: String,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train a fresh model (or resume one with `--resume`).
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        data: Vec<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint, possibly at a new frame setting.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Vec<PathBuf>,
    },
    /// Learning curves over training-set sizes, pretrained against scratch.
    Fewshot {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Sample counts, e.g. `50,100,250`.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Evaluate a checkpoint (or the constant-velocity baseline).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        predictor: Option<PredictorKind>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Modality subsets, `;`-separated, e.g. `T;T,3dP`.
        #[arg(long)]
        modalities: Option<String>,
        /// Pose corruption, e.g. `keep=0.5` or `noise=25`; repeatable.
        #[arg(long)]
        corrupt: Vec<String>,
        /// MPJPE horizons in milliseconds, e.g. `400,1000`.
        #[arg(long)]
        mpjpe_ms: Option<String>,
    },
    /// Train one model per masking strategy and evaluate each.
    AblateMask {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        data: Vec<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Paired baseline and predictive navigation episodes.
    Navsim {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        predictor: Option<PredictorKind>,
        #[arg(long)]
        episodes: Option<usize>,
        /// A single scenario JSON instead of the crossing suite.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Convert {
            common,
            input,
            dataset,
            split,
            to_fps,
        } => commands::convert(Run::new("convert", &common)?, &input, &dataset, &split, to_fps),
        Command::Synth {
            common,
            scenes,
            dataset,
            split,
        } => commands::synth(Run::new("synth", &common)?, scenes, &dataset, &split),
        Command::Pretrain {
            common,
            train,
            data,
            resume,
        } => commands::pretrain(Run::new("pretrain", &common)?, &train, &data, &resume),
        Command::Finetune {
            common,
            train,
            checkpoint,
            data,
        } => commands::finetune(Run::new("finetune", &common)?, &train, &checkpoint, &data),
        Command::Fewshot {
            common,
            train,
            checkpoint,
            data,
            eval_data,
            grid,
        } => commands::fewshot(Run::new("fewshot", &common)?, &train, &checkpoint, &data, &eval_data, &grid),
        Command::Eval {
            common,
            checkpoint,
            predictor,
            data,
            modalities,
            corrupt,
            mpjpe_ms,
        } => commands::eval(
            Run::new("eval", &common)?,
            &EvalArgs {
                checkpoint,
                predictor,
                data,
                modalities,
                corrupt,
                mpjpe_ms,
            },
        ),
        Command::AblateMask {
            common,
            train,
            data,
            eval_data,
        } => commands::ablate_mask(Run::new("ablate-mask", &common)?, &train, &data, &eval_data),
        Command::Navsim {
            common,
            checkpoint,
            predictor,
            episodes,
            scenario,
        } => commands::navsim(Run::new("navsim", &common)?, &checkpoint, predictor, episodes, &scenario),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if e.downcast_ref::<Invalid>().is_some() {
                eprintln!("error: {e}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(1)
        }
    }
}
