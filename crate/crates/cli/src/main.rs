use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use collidenet::commands::{self, Ctx, DiagnoseSource};
use collidenet::config::RunConfig;
use collidenet::manifest::parse_split;

/// Time-to-collision forecasting on synthetic approach videos.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// `section.key = value` configuration file; defaults to the desk preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Run ablation rows and sweep values sequentially.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset and write its manifest.
    GenData,
    /// Train one model and save a checkpoint with its history.
    Train {
        /// Manifest to train on [default: <out>/manifest.csv]
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        /// [default: <out>/checkpoint.cnck]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train every ablation row over `run.seeds` seeds.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated row ids [default: all 14]
        #[arg(long, value_delimiter = ',')]
        rows: Option<Vec<u8>>,
    },
    /// Sensitivity sweep along one axis.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        /// spatial_scales, temporal_scales or window_k
        #[arg(long)]
        axis: String,
        /// Comma-separated values [default: the axis grid]
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
    },
    /// ADF and KPSS statistics of embedding sequences before and after normalisation.
    Diagnose {
        /// Dataset to encode; without it, synthetic drifting series are tested.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Encoder weights; without it, a fresh encoder from the config and seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// identity, per-sequence or windowed:N
        #[arg(long, default_value = "per-sequence")]
        normalizer: String,
    },
    /// Trend and seasonal parts of an n x d sequence as CSV.
    Decompose {
        /// CNT1 tensor; without it, a synthetic series.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Moving-average window [default: temporal.window]
        #[arg(long)]
        window: Option<usize>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    let ctx = Ctx {
        config,
        seed: cli.seed,
        out: cli.out,
        deterministic: cli.deterministic,
    };
    let summary = match cli.command {
        Command::GenData => commands::gen_data(&ctx)?,
        Command::Train { data } => commands::train_cmd(&ctx, data.as_deref())?,
        Command::Eval { checkpoint, data, split } => {
            commands::eval(&ctx, checkpoint.as_deref(), data.as_deref(), parse_split(&split)?)?
        }
        Command::Ablate { data, rows } => commands::ablate(&ctx, data.as_deref(), rows.as_deref())?,
        Command::Sweep { data, axis, values } => {
            commands::sweep(&ctx, data.as_deref(), commands::parse_axis(&axis)?, values.as_deref())?
        }
        Command::Diagnose { data, checkpoint, split, normalizer } => {
            let normalizer = commands::parse_normalizer(&normalizer)?;
            let source = if data.is_some() || checkpoint.is_some() {
                DiagnoseSource::Data {
                    manifest: data.as_deref(),
                    checkpoint: checkpoint.as_deref(),
                    split: parse_split(&split)?,
                }
            } else {
                DiagnoseSource::Synthetic
            };
            commands::diagnose(&ctx, source, normalizer)?
        }
        Command::Decompose { input, window } => commands::decompose_cmd(&ctx, input.as_deref(), window)?,
    };
    println!("{}", summary.trim_end());
    Ok(())
}
