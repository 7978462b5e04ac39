use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Result, TrainingError};
use crate::models::ParamStore;
use crate::tensor::Tensor;

/// AdamW hyperparameters. The learning rate comes from the schedule per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamW {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(TrainingError::Config(format!("invalid optimiser settings {self:?}")))
        }
    }
}

/// Moments for exactly the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamW,
    pub step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl OptimizerState {
    /// `trainable` lists the parameter names and shapes to be updated.
    pub fn new<'a>(hyper: AdamW, trainable: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> Self {
        let moments = trainable
            .into_iter()
            .map(|(n, s)| (n.to_string(), (Tensor::zeros(s), Tensor::zeros(s))))
            .collect();
        Self { hyper, step: 0, moments }
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.moments.keys()
    }

    /// One AdamW update at learning rate `lr` over every store that holds a
    /// trainable parameter. `grads` must cover exactly the trainable set.
    pub fn step(&mut self, stores: &mut [&mut ParamStore], grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        if grads.len() != self.moments.len() || grads.keys().zip(self.moments.keys()).any(|(a, b)| a != b) {
            let missing: Vec<_> = self.moments.keys().filter(|k| !grads.contains_key(*k)).collect();
            let extra: Vec<_> = grads.keys().filter(|k| !self.moments.contains_key(*k)).collect();
            return Err(TrainingError::GradientKeys(format!("missing {missing:?}, unexpected {extra:?}")));
        }
        self.step += 1;
        let AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.hyper;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, (m, v)) in self.moments.iter_mut() {
            let g = &grads[name];
            let p = stores
                .iter_mut()
                .find_map(|s| s.get_mut(name))
                .ok_or_else(|| TrainingError::GradientKeys(format!("no store holds `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(TrainingError::GradientKeys(format!(
                    "`{name}` has shape {:?} but its gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let decay = 1.0 - lr * weight_decay;
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p *= decay;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales every gradient by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> Result<f64> {
    if max_norm.is_nan() || max_norm <= 0.0 {
        return Err(TrainingError::Config(format!("clip norm must be positive, got {max_norm}")));
    }
    let norm = grads.values().map(Tensor::l2_norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    Ok(norm)
}
