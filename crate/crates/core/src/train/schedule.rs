//! Learning-rate schedule and the scalar cross-entropy reference.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Invalid("cosine schedule needs at least one step".into()));
    }
    if step > total {
        return Err(Error::Invalid(format!("step {step} beyond schedule length {total}")));
    }
    if step == total {
        return Ok(lr_min);
    }
    let c = (PI * step as f64 / total as f64).cos();
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + c))
}

/// `-log softmax(logits)[label]` via log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Invalid(format!("label {label} outside {} classes", logits.len())));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    Ok((lse - logits[label]).max(0.0))
}
