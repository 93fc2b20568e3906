//! `tskd`: runs the transfer-set, teacher, pretraining, fine-tuning and
//! evaluation stages as separate commands sharing a working directory, and
//! aggregates finished runs into tables and charts.

mod commands;
mod error;
mod report;
mod workspace;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kd_core::config::{ExperimentConfig, Method, ScheduleSet};

use error::CliResult;
use workspace::Work;

#[derive(Parser, Debug)]
#[command(
    name = "tskd",
    version,
    about = "Distil a LoRA-adapted segmentation teacher into a small ViT student"
)]
struct Cli {
    /// Working directory holding all artifacts.
    #[arg(long, global = true, default_value = "tskd-work")]
    work: PathBuf,
    /// TOML experiment configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use the full-length training schedules instead of the desk-scale ones.
    #[arg(long, global = true)]
    paper_schedules: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct CellArgs {
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    /// Transfer images used for pretraining.
    #[arg(long)]
    pub transfer_size: Option<usize>,
    /// Task-specific distillation variant, `TS-KD1` to `TS-KD8`.
    #[arg(long)]
    pub ts_config: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Geometric augmentation of the labelled pool's images.
    Augment {
        #[arg(long)]
        size: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the denoising diffusion model on augmented pool images.
    DiffusionTrain {
        /// Optimiser steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample synthetic transfer images from the trained denoiser.
    DiffusionSample {
        #[arg(long)]
        size: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Nearest-neighbour PSNR/MSE of a generated set against a reference set.
    EvalTransfer {
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the foundation teacher if needed, then adapt it with LoRA.
    TeacherFinetune {
        #[arg(long)]
        rank: usize,
    },
    /// Adapt one teacher per rank and keep the best on a validation split.
    RankSweep {
        #[arg(long, value_delimiter = ',', required = true)]
        ranks: Vec<usize>,
    },
    /// Self-supervised or distillation pretraining of a student.
    Pretrain {
        #[command(flatten)]
        cell: CellArgs,
    },
    /// Supervised fine-tuning on a labelled subset.
    Finetune {
        #[command(flatten)]
        cell: CellArgs,
        /// Number of labelled images.
        #[arg(long)]
        labels: Option<usize>,
    },
    /// Score a fine-tuned student, a checkpoint, or a directory of predicted masks.
    Evaluate {
        #[command(flatten)]
        cell: CellArgs,
        #[arg(long)]
        labels: Option<usize>,
        /// Student checkpoint to score instead of a run cell.
        #[arg(long, conflicts_with = "pred")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory whose masks are taken as predictions.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Labelled dataset to score against (defaults to the generated test set).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate evaluated runs into a CSV table and SVG charts.
    Report {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

/// Defaults, then the config file, then global flags.
fn base_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if cli.paper_schedules {
        cfg.schedules = ScheduleSet::paper();
    }
    Ok(cfg)
}

impl CellArgs {
    /// Applies the cell flags on top of `cfg` and validates the result.
    pub fn resolve(&self, mut cfg: ExperimentConfig) -> CliResult<ExperimentConfig> {
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(t) = self.transfer_size {
            cfg.transfer_size = t;
        }
        if let Some(c) = &self.ts_config {
            cfg.distillation = c.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let work = Work::new(&cli.work);
    let cfg = base_config(&cli)?;
    match cli.command {
        Command::Augment { size, seed, out } => commands::augment(&work, cfg, size, seed, out),
        Command::DiffusionTrain { steps, seed, out } => {
            commands::diffusion_train(&work, cfg, steps, seed, out)
        }
        Command::DiffusionSample { size, seed, out } => {
            commands::diffusion_sample(&work, cfg, size, seed, out)
        }
        Command::EvalTransfer {
            generated,
            reference,
            out,
        } => commands::eval_transfer(&work, generated, reference, out),
        Command::TeacherFinetune { rank } => commands::teacher_finetune(&work, cfg, rank),
        Command::RankSweep { ranks } => commands::rank_sweep(&work, cfg, &ranks),
        Command::Pretrain { cell } => commands::pretrain(&work, cell.resolve(cfg)?),
        Command::Finetune { cell, labels } => {
            let mut cfg = cell.resolve(cfg)?;
            if let Some(n) = labels {
                cfg.label_budget = n;
            }
            commands::finetune(&work, cfg)
        }
        Command::Evaluate {
            cell,
            labels,
            checkpoint,
            pred,
            data,
            out,
        } => {
            let mut cfg = cell.resolve(cfg)?;
            if let Some(n) = labels {
                cfg.label_budget = n;
            }
            let target = match (checkpoint, pred) {
                (Some(c), _) => commands::EvalTarget::Checkpoint(c),
                (_, Some(p)) => commands::EvalTarget::Predictions(p),
                _ => commands::EvalTarget::Cell,
            };
            commands::evaluate(&work, cfg, target, data, out)
        }
        Command::Report { out } => report::report(&work, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
