use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CliError, Result};
use crate::graph::Task;
use crate::models::{Backbone, BackboneConfig};
use crate::prompt::TuningMode;
use crate::training::{AdamW, Decay, TuningConfig};

/// Top-level experiment file (TOML). Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub pretrain: PretrainSpec,
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub tuning: TuningConfig,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub ablation: AblationSpec,
}

/// Pretext regression used to pre-train the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSpec {
    pub count: usize,
    pub size_range: [usize; 2],
    /// Read samples from this graph file instead of generating them.
    pub file: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: f64,
    pub decay: Decay,
    pub optimizer: AdamW,
    pub clip_norm: f64,
    /// One in `holdout_folds` samples is held out to report RMSE.
    pub holdout_folds: usize,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self {
            count: 2000,
            size_range: [8, 16],
            file: None,
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            warmup_epochs: 1.0,
            decay: Decay::Cosine,
            optimizer: AdamW::default(),
            clip_norm: 5.0,
            holdout_folds: 10,
        }
    }
}

impl PretrainSpec {
    pub fn tuning(&self) -> TuningConfig {
        TuningConfig {
            mode: TuningMode::Ft,
            prompt_len: 0,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_epochs: self.warmup_epochs,
            decay: self.decay,
            optimizer: self.optimizer,
            clip_norm: self.clip_norm,
            ..TuningConfig::default()
        }
    }
}

/// Downstream dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub name: Task,
    pub count: usize,
    pub size_range: [usize; 2],
    pub file: Option<PathBuf>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            name: Task::MotifPresence,
            count: 1000,
            size_range: [8, 16],
            file: None,
        }
    }
}

/// Learning-rate and weight-decay grid for `tune`; each defaults to the
/// single value in `[tuning]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub lr: Vec<f64>,
    pub weight_decay: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    /// Inclusive layer intervals.
    pub depth: Vec<[usize; 2]>,
    pub length: Vec<usize>,
    pub component: Vec<TuningMode>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            depth: Vec::new(),
            length: (1..=11).map(|k| 10 * k).collect(),
            component: vec![TuningMode::Lightweight, TuningMode::PrefixOnly, TuningMode::Deepgpt],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks every section that does not need data or a checkpoint.
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let probe = Backbone {
            config: self.backbone.clone(),
            params: Default::default(),
        };
        self.tuning.validate(&probe)?;
        self.pretrain.tuning().validate(&probe)?;
        for [lo, hi] in [self.pretrain.size_range, self.task.size_range] {
            if lo < 4 || hi > 64 || lo > hi {
                return Err(CliError::Config(format!("size range [{lo}, {hi}] must lie within 4..=64")));
            }
        }
        if self.pretrain.holdout_folds < 2 {
            return Err(CliError::Config("pretrain.holdout_folds must be at least 2".into()));
        }
        if self.grid.lr.iter().chain(&self.grid.weight_decay).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CliError::Config("grid values must be finite and non-negative".into()));
        }
        if self.grid.lr.contains(&0.0) {
            return Err(CliError::Config("grid learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> Result<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out.clone())
            .ok_or_else(|| CliError::Config("no output directory: pass --out or set `out`".into()))
    }

    /// Grid cells as `(lr, weight_decay)`, in config order.
    pub fn grid_cells(&self) -> Vec<(f64, f64)> {
        let lrs = if self.grid.lr.is_empty() { vec![self.tuning.lr] } else { self.grid.lr.clone() };
        let wds = if self.grid.weight_decay.is_empty() {
            vec![self.tuning.optimizer.weight_decay]
        } else {
            self.grid.weight_decay.clone()
        };
        lrs.iter().flat_map(|&lr| wds.iter().map(move |&wd| (lr, wd))).collect()
    }
}
