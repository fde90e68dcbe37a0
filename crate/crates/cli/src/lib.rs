//! Command-line driver: `synth`, `train`, `infer`, `smooth` and `score`.
//!
//! Every command reads a [`RunConfig`] (file plus `--set key=value`
//! overrides) and writes its report to the supplied writer, so the binary
//! and the tests share one code path.

pub mod commands;
pub mod config;

use std::io::Write;
use std::path::PathBuf;

use asd_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "asd", about = "Audio-visual active speaker detection")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Config file of `key = value` lines.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set backend=tc`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (bundles plus train/val annotation CSVs) to `data_dir`.
    Synth,
    /// Train on `data_dir` and write `checkpoint`.
    Train,
    /// Score every row of an annotation CSV and write `output`.
    Infer {
        /// Ground-truth CSV whose rows are scored; defaults to the validation split.
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Smooth a prediction CSV per entity.
    Smooth {
        input: PathBuf,
        output: PathBuf,
        /// none, median or wiener; defaults to the config's `smoothing`.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        window: Option<f64>,
    },
    /// mAP of a prediction CSV against ground truth.
    Score {
        ground_truth: PathBuf,
        predictions: PathBuf,
        /// Also write the precision-recall curve here.
        #[arg(long)]
        pr_curve: Option<PathBuf>,
    },
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::load(cli.global.config.as_deref(), &cli.global.overrides)?;
    match &cli.command {
        Command::Synth => commands::synth(&cfg, out),
        Command::Train => commands::train(&cfg, out).map(|_| ()),
        Command::Infer { annotations } => {
            let gt = annotations.clone().unwrap_or_else(|| cfg.val_annotations());
            commands::infer(&cfg, &gt, out)
        }
        Command::Smooth {
            input,
            output,
            method,
            window,
        } => {
            let method = match method {
                Some(m) => m.parse()?,
                None => cfg.smoothing,
            };
            commands::smooth(input, output, method, window.unwrap_or(cfg.window_seconds), out)
        }
        Command::Score {
            ground_truth,
            predictions,
            pr_curve,
        } => commands::score(&cfg, ground_truth, predictions, pr_curve.as_deref(), out),
    }
}

/// 1 for bad input, configuration or files; 2 for failures inside the pipeline.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Input(_)
        | Error::Contract(_)
        | Error::Parse { .. }
        | Error::Alignment { .. }
        | Error::Coverage { .. }
        | Error::UndefinedMetric(_)
        | Error::Load(_)
        | Error::Io(_) => 1,
        Error::Dimension { .. } | Error::Index(_) | Error::State(_) | Error::Numeric(_) => 2,
    }
}
