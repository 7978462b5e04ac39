//! Experiment runner: config files, checkpoints, the four subcommands and
//! their CSV outputs.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 config error, 3 data error,
//! 4 checkpoint mismatch.

mod checkpoint;
mod commands;
mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub use checkpoint::{
    backbone_checkpoint, fingerprint, load_backbone, load_prompt, planned_len, prompt_checkpoint, save_backbone,
    save_prompt, Checkpoint, FoldOrigin, Payload, PromptMeta, FORMAT_VERSION,
};
pub use commands::{
    cmd_ablate, cmd_pretrain, cmd_report, cmd_tune, cv_seed, load_task, objective_for, ConvergenceRow, EpochRow,
    FoldRow, GridRow, PretrainRow, PretrainSummary, ResultRow, RunOptions, SummaryRow,
};
pub use config::{AblationSpec, ExperimentConfig, GridSpec, PretrainSpec, TaskSpec};

use crate::graph::GraphError;
use crate::models::ModelError;
use crate::training::TrainingError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Checkpoint(_) => 4,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Graph(g) => g.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::Model(m) => m.into(),
            TrainingError::Graph(g) => g.into(),
            TrainingError::Config(m) => CliError::Config(m),
            TrainingError::Metric(m) => CliError::Data(m),
            other => CliError::Io(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Writes `bytes` next to `path` and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Depth,
    Length,
    Component,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Depth => "depth",
            Axis::Length => "length",
            Axis::Component => "component",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gpt-lab", version, about = "Prompt tuning experiments on frozen graph backbones")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, clap::Args)]
pub struct CvArgs {
    #[arg(long, value_name = "PATH")]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Worker threads for folds; capped by GPT_LAB_THREADS.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train a backbone on the pretext regression.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Cross-validate one tuning regime over the lr/weight-decay grid.
    Tune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cv: CvArgs,
    },
    /// Sweep one ablation axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cv: CvArgs,
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Summarise finished run directories.
    Report {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(required = true, value_name = "RUN_DIR")]
        runs: Vec<PathBuf>,
    },
}

/// Worker count: `requested`, capped by `GPT_LAB_THREADS` when set.
pub fn thread_cap(requested: usize, env: Option<&str>) -> Result<usize> {
    let requested = requested.max(1);
    match env {
        None => Ok(requested),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(cap) if cap > 0 => Ok(requested.min(cap)),
            _ => Err(CliError::Config(format!("GPT_LAB_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

fn load_config(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let out = cfg.out_dir(common.out.as_deref())?;
    Ok((cfg, out))
}

fn run_options(cv: &CvArgs) -> Result<RunOptions> {
    let env = std::env::var("GPT_LAB_THREADS").ok();
    Ok(RunOptions {
        folds: cv.folds,
        threads: thread_cap(cv.parallel, env.as_deref())?,
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common } => {
            let (cfg, out) = load_config(&common)?;
            let s = cmd_pretrain(&cfg, &out)?;
            println!("final pretext rmse: {}", s.final_rmse);
            println!("backbone checkpoint: {}", s.checkpoint.display());
        }
        Command::Tune { common, cv } => {
            let (cfg, out) = load_config(&common)?;
            let rows = cmd_tune(&cfg, &cv.ckpt, &out, &run_options(&cv)?)?;
            for r in rows {
                println!(
                    "{} lr={} wd={}: {} {:.4} ± {:.4} ({} trainable)",
                    r.mode, r.lr, r.weight_decay, r.metric, r.mean, r.std, r.params_trainable
                );
            }
        }
        Command::Ablate { common, cv, axis } => {
            let (cfg, out) = load_config(&common)?;
            let rows = cmd_ablate(&cfg, &cv.ckpt, &out, axis, &run_options(&cv)?)?;
            for r in rows {
                println!("{} {}: {} {:.4} ± {:.4}", r.axis, r.cell, r.metric, r.mean, r.std);
            }
        }
        Command::Report { out, runs } => {
            for r in cmd_report(&runs, &out)? {
                println!(
                    "{}: {} runs, {} {:.4}, epochs to best {:.2}, {:.3} s/epoch",
                    r.mode, r.runs, r.metric, r.mean, r.epochs_to_best_mean, r.epoch_seconds_mean
                );
            }
        }
    }
    Ok(())
}
