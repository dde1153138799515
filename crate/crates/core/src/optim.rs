//! AdamW with decoupled weight decay.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParameterStore;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("trainable parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("gradient for `{0}` contains a non-finite value")]
    NonFiniteGradient(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state. Moments exist only for parameters outside the freeze mask.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn has_moments(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    /// Applies one update to every trainable parameter and clears all
    /// gradient accumulators. Frozen parameters are never written.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<(), OptimError> {
        for (name, t) in store.iter() {
            if store.is_frozen(name) {
                continue;
            }
            match &t.grad {
                None => return Err(OptimError::MissingGradient(name.to_string())),
                Some(g) if g.iter().any(|v| !v.is_finite()) => {
                    return Err(OptimError::NonFiniteGradient(name.to_string()))
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        let frozen = store.freeze_mask().clone();
        for (name, t) in store.iter_mut() {
            if frozen.contains(name) {
                t.grad = None;
                continue;
            }
            let grad = t.grad.take().expect("checked above");
            let st = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            for (((w, g), m), v) in t.data_mut().iter_mut().zip(&grad).zip(&mut st.m).zip(&mut st.v) {
                *w -= c.lr * c.weight_decay * *w;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *w -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(w: f64, g: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::scalar(w)).unwrap();
        s.get_mut("w").unwrap().grad = Some(vec![g]);
        s
    }

    #[test]
    fn one_step_closed_form() {
        let mut s = store_with(1.0, 0.5);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        opt.step(&mut s).unwrap();
        let w = s.get("w").unwrap().data()[0];
        // first step: m̂ = g, v̂ = g², update = lr·g/(|g|+eps)
        let want = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((w - want).abs() < 1e-15);
        assert!((w - 0.99).abs() < 1e-9);
        assert_eq!(opt.steps(), 1);
        assert!(s.get("w").unwrap().grad.is_none());
    }

    #[test]
    fn decay_only_with_zero_gradient() {
        let mut s = store_with(2.0, 0.0);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        });
        opt.step(&mut s).unwrap();
        assert_eq!(s.get("w").unwrap().data()[0], 2.0 * (1.0 - 0.1 * 0.5));
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut s = store_with(1.25, 3.0);
        s.insert("p", Tensor::scalar(0.5)).unwrap();
        s.get_mut("p").unwrap().grad = Some(vec![1.0]);
        s.set_freeze_mask(["w".to_string()].into()).unwrap();
        let before = s.get("w").unwrap().data()[0].to_bits();
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..3 {
            s.get_mut("w").unwrap().grad = Some(vec![3.0]);
            s.get_mut("p").unwrap().grad = Some(vec![1.0]);
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.get("w").unwrap().data()[0].to_bits(), before);
        assert_ne!(s.get("p").unwrap().data()[0], 0.5);
        assert!(!opt.has_moments("w"));
        assert!(opt.has_moments("p"));
        assert_eq!(opt.steps(), 3);
    }

    #[test]
    fn missing_gradient_is_a_contract_violation() {
        let mut s = store_with(1.0, 0.0);
        s.get_mut("w").unwrap().grad = None;
        let mut opt = AdamW::new(AdamWConfig::default());
        assert_eq!(opt.step(&mut s), Err(OptimError::MissingGradient("w".into())));
        assert_eq!(opt.steps(), 0);
    }
}
