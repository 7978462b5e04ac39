use super::{Result, TrainingError};
use crate::tensor::{Tape, Tensor, Var};

/// Entries with a finite label take part in the loss; NaN marks a missing label.
pub fn label_mask(labels: &Tensor) -> Vec<bool> {
    labels.data().iter().map(|y| y.is_finite()).collect()
}

/// Masked mean binary cross-entropy on logits.
pub fn bce_loss(tape: &mut Tape, logits: Var, labels: &Tensor, mask: &[bool]) -> Result<Var> {
    if tape.shape(logits) != labels.shape() {
        return Err(TrainingError::Config(format!(
            "logits {:?} do not match labels {:?}",
            tape.shape(logits),
            labels.shape()
        )));
    }
    let y: Vec<f64> = labels
        .data()
        .iter()
        .zip(mask)
        .map(|(&y, &m)| if m { y } else { 0.0 })
        .collect();
    Ok(tape.bce_with_logits(logits, &y, mask)?)
}

/// Mean squared error between `preds` and constant `labels`.
pub fn mse_loss(tape: &mut Tape, preds: Var, labels: &Tensor) -> Result<Var> {
    let y = tape.constant(labels.clone());
    let diff = tape.sub(preds, y)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq)?)
}

pub fn mse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(TrainingError::Metric(format!(
            "mse needs equal non-empty inputs, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    Ok(preds.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / preds.len() as f64)
}

pub fn rmse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    mse(preds, labels).map(f64::sqrt)
}
