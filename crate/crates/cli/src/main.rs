//! `smt`: solar irradiance forecasting pipeline over public-camera frames
//! and normalized GHI windows.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or input description: exit code 2.
    Usage(String),
    /// Failure while doing the work: exit code 1.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "smt",
    version,
    about = "Solar Multimodal Transformer: intraday GHI forecasting from camera frames and normalized time series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainOverrides {
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override pillars: both, image_only or ts_only.
    #[arg(long)]
    pillars: Option<String>,
    /// Override patch shape: square, row or column.
    #[arg(long)]
    patch_shape: Option<String>,
    /// Override stacked frame count (1..=3).
    #[arg(long)]
    frames: Option<usize>,
    /// Override the GHI window length S.
    #[arg(long)]
    window_len: Option<usize>,
    /// Override the forecast horizon in minutes.
    #[arg(long)]
    horizon_min: Option<i64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (manifest, PPM frames, truth log).
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write checkpoint, history and effective config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Evaluate a checkpoint on the manifest's test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Smart-persistence baseline over the manifest, same report format.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 120)]
        horizon_min: i64,
        #[arg(long)]
        report: PathBuf,
    },
    /// One forecast from an image and a window CSV (`timestamp,ghi` rows).
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        window: PathBuf,
        /// Forecast issue time (ISO-8601 with offset).
        #[arg(long)]
        t: String,
    },
    /// Export rollout and last-layer attention heatmaps for one sample.
    Attn {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Sample timestamp (ISO-8601 with offset).
        #[arg(long)]
        t: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn apply_overrides(cfg: &mut config::RunConfig, o: &TrainOverrides) -> Result<(), CliError> {
    if let Some(seed) = o.seed {
        cfg.train.seed = seed;
        cfg.overrides.push(format!("seed = {seed}"));
    }
    if let Some(p) = &o.pillars {
        cfg.model.pillars = config::parse_pillars(p)?;
        if cfg.model.pillars == smt_core::model::Pillars::ImageOnly {
            cfg.model.ts_count = 0;
        }
        cfg.overrides.push(format!("pillars = {p}"));
    }
    if let Some(shape) = &o.patch_shape {
        cfg.model.patch_shape = match shape.as_str() {
            "square" => smt_core::model::PatchShape::Square { a: 16, b: 16 },
            "row" => smt_core::model::PatchShape::Row,
            "column" => smt_core::model::PatchShape::Column,
            other => {
                return Err(CliError::Usage(format!(
                    "patch shape {other:?} (expected square, row or column)"
                )))
            }
        };
        cfg.overrides.push(format!("patch_shape = {shape}"));
    }
    if let Some(frames) = o.frames {
        cfg.model.frames = frames;
        cfg.overrides.push(format!("frames = {frames}"));
    }
    if let Some(window) = o.window_len {
        cfg.model.ts_len = window;
        cfg.overrides.push(format!("window_len = {window}"));
    }
    if let Some(h) = o.horizon_min {
        cfg.horizon_min = h;
        cfg.overrides.push(format!("horizon_min = {h}"));
    }
    cfg.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config, out, seed } => commands::cmd_synth(&config, &out, seed),
        Command::Train { config, manifest, out, overrides } => {
            let mut cfg = config::RunConfig::load(&config)?;
            apply_overrides(&mut cfg, &overrides)?;
            commands::cmd_train_with(cfg, &manifest, &out)
        }
        Command::Eval { config, ckpt, manifest, report } => {
            commands::cmd_eval(&config, &ckpt, &manifest, &report)
        }
        Command::Baseline { config, manifest, horizon_min, report } => {
            commands::cmd_baseline(&config, &manifest, horizon_min, &report)
        }
        Command::Predict { config, ckpt, image, window, t } => {
            commands::cmd_predict(&config, &ckpt, &image, &window, &t)
        }
        Command::Attn { config, ckpt, manifest, t, out } => {
            commands::cmd_attn(&config, &ckpt, &manifest, &t, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
    }
}
