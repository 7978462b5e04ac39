use serde::{Deserialize, Serialize};

use super::{Result, TrainingError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    Cosine,
    Linear,
}

/// Linear warm-up from 0 to `base_lr`, then cosine or linear decay to 0 at
/// `total_epochs`. Epochs are fractional so the rate can change per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub decay: Decay,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr.is_nan() || self.base_lr <= 0.0 {
            return Err(TrainingError::Config(format!("learning rate must be positive, got {}", self.base_lr)));
        }
        if !(0.0 <= self.warmup_epochs && self.warmup_epochs < self.total_epochs) {
            return Err(TrainingError::Config(format!(
                "need 0 <= warmup ({}) < total epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: f64) -> f64 {
        if epoch < self.warmup_epochs {
            return self.base_lr * epoch / self.warmup_epochs;
        }
        let progress = ((epoch - self.warmup_epochs) / (self.total_epochs - self.warmup_epochs)).clamp(0.0, 1.0);
        match self.decay {
            Decay::Cosine => self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0,
            Decay::Linear => self.base_lr * (1.0 - progress),
        }
    }
}
