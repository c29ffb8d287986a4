//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
}

pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter in `store`. Parameters absent
    /// from `grads` are treated as having zero gradient; frozen ones are skipped.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(c.eps);
        for (name, p) in store.iter_mut() {
            if p.frozen {
                continue;
            }
            let shape = p.value.shape().to_vec();
            let g = grads.get(name);
            if let Some(g) = g {
                if g.shape() != shape.as_slice() {
                    return Err(Error::Shape(format!(
                        "gradient for `{name}` has shape {:?}, parameter {shape:?}",
                        g.shape()
                    )));
                }
            }
            let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
            });
            let gd = g.map(|g| g.data());
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = gd.map_or(T::zero(), |d| d[i]);
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                *w *= decay;
                *w -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(&[1], vec![v]).unwrap());
        s
    }

    #[test]
    fn zero_gradient_step_is_pure_decay() {
        let mut s = store(2.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        });
        opt.step(&mut s, &BTreeMap::new(), 0.01).unwrap();
        assert_eq!(s.tensor("w").unwrap().item(), 2.0 * (1.0 - 0.01 * 0.1));
    }

    #[test]
    fn first_step_moves_against_gradient_by_at_most_lr() {
        for (x0, lr) in [(3.0, 0.1), (-1.5, 0.01), (0.2, 1e-3)] {
            let mut s = store(x0);
            let mut opt = AdamW::new(AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            });
            // Gradient of x^2.
            let g = BTreeMap::from([("w".to_string(), Tensor::from_vec(&[1], vec![2.0 * x0]).unwrap())]);
            opt.step(&mut s, &g, lr).unwrap();
            let x1 = s.tensor("w").unwrap().item();
            assert!((x1 - x0).signum() == -x0.signum());
            assert!((x1 - x0).abs() <= lr);
        }
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut s = store(1.0);
        s.set_frozen("w", true);
        let mut opt = AdamW::new(AdamWConfig::default());
        let g = BTreeMap::from([("w".to_string(), Tensor::from_vec(&[1], vec![1.0]).unwrap())]);
        opt.step(&mut s, &g, 0.1).unwrap();
        assert_eq!(s.tensor("w").unwrap().item(), 1.0);
    }
}
