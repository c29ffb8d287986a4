//! Classifier head: global average pool, layer norm, linear map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Binder, ParamStore};
use crate::tensor::{Float, Tensor};

pub fn init_head<T: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    dim: usize,
    classes: usize,
) {
    nn::init_layer_norm(store, &format!("{prefix}.norm"), dim);
    nn::init_linear(store, rng, &format!("{prefix}.fc"), dim, classes, true);
}

/// Features `[B, ..., D]` to logits `[B, classes]`.
pub fn head_forward<T: Float>(g: &mut Graph<T>, b: &mut Binder<'_, T>, prefix: &str, features: Var) -> Result<Var> {
    let pooled = if g.shape(features).len() == 2 {
        features
    } else {
        g.mean_middle(features)?
    };
    let y = nn::layer_norm(g, b, &format!("{prefix}.norm"), pooled)?;
    nn::linear(g, b, &format!("{prefix}.fc"), y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DamageLogits {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// Index of the largest logit (first on ties).
    pub label: usize,
}

impl DamageLogits {
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::Shape("no logits".into()));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let probabilities = exps.iter().map(|e| e / total).collect();
        let label = argmax(&logits);
        Ok(Self {
            logits,
            probabilities,
            label,
        })
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Apply the head stored under `prefix` to a batch of features `[B, ..., D]`.
pub fn classify<T: Float>(features: &Tensor<T>, store: &ParamStore<T>, prefix: &str) -> Result<Vec<DamageLogits>> {
    let mut g = Graph::new();
    let mut b = Binder::new(store);
    let x = g.constant(features.clone());
    let logits = head_forward(&mut g, &mut b, prefix, x)?;
    logits_rows(g.value(logits))
}

pub fn logits_rows<T: Float>(logits: &Tensor<T>) -> Result<Vec<DamageLogits>> {
    let k = *logits.shape().last().unwrap_or(&0);
    logits
        .data()
        .chunks(k.max(1))
        .map(|row| DamageLogits::from_logits(row.iter().map(|v| v.as_f64()).collect()))
        .collect()
}
