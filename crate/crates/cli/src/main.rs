mod commands;
mod config;
mod error;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "p4d", version, about = "Multimodal 4D panoptic segmentation on synthetic driving scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run config; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value by dot path, e.g. `--set training.seed=7`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Dataset seed (overrides `data.seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of scenes (overrides `data.scenes`).
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Stage 1: train the segmentation model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: train the tracklet association module on a frozen model.
    TrainTam {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment and track every scene; writes per-frame prediction files.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Stage-1 checkpoint directory.
        #[arg(long)]
        model: PathBuf,
        /// Stage-2 checkpoint directory.
        #[arg(long)]
        tam: Option<PathBuf>,
        /// Dataset or single scene directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Associate by single-frame mask IoU instead of the TAM.
        #[arg(long)]
        baseline_iou: bool,
    },
    /// Score predictions against ground truth (JSON and CSV reports).
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Prediction directory written by `infer`.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth dataset or scene directory.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Cross-check every metric against the brute-force evaluator.
        #[arg(long)]
        oracle: bool,
    },
    /// Plot loss curves and metrics; write a markdown summary.
    Report {
        /// Training log CSV, optionally `name=path`. Repeatable.
        #[arg(long = "log")]
        logs: Vec<String>,
        /// Metric report JSON, optionally `name=path`. Repeatable.
        #[arg(long = "report")]
        reports: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { cfg, out, seed, scenes } => {
            let mut c = cfg.load()?;
            if let Some(s) = seed {
                c.data.seed = s;
            }
            if let Some(n) = scenes {
                c.data.scenes = n;
            }
            let hash = commands::generate(&c, &out)?;
            println!("dataset {} ({} scenes) sha256 {hash}", out.display(), c.data.scenes);
        }
        Command::Train { cfg, data, out } => {
            let hash = commands::train(&cfg.load()?, &data, &out)?;
            println!("checkpoint {} sha256 {hash}", out.join(commands::MODEL_CKPT).display());
        }
        Command::TrainTam { cfg, data, model, out } => {
            let hash = commands::train_tam(&cfg.load()?, &data, &model, &out)?;
            println!("checkpoint {} sha256 {hash}", out.join(commands::TAM_CKPT).display());
        }
        Command::Infer { cfg, model, tam, data, out, baseline_iou } => {
            let mut c = cfg.load()?;
            c.tracking.baseline_iou |= baseline_iou;
            let scenes = commands::infer(&c, &model, tam.as_deref(), &data, &out)?;
            println!("predictions for {} scene(s) in {}", scenes.len(), out.display());
        }
        Command::Eval { cfg, pred, gt, out, oracle } => {
            let r = commands::eval(&cfg.load()?, &pred, &gt, &out, oracle)?;
            for (n, v) in r.means.named() {
                println!("{n:>10} {v:.4}");
            }
        }
        Command::Report { logs, reports, out } => {
            report::report(&logs, &reports, &out)?;
            println!("report written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
