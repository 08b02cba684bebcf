use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::DualHeadModel;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
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

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// Adam with decoupled weight decay. Decay applies to matrices only; biases,
/// norm gains and embeddings-as-vectors are left alone.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    moments: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` pairs parameter indices with gradients of
    /// matching length; frozen parameters are rejected.
    pub fn step(&mut self, model: &mut DualHeadModel, grads: &[(usize, Vec<f64>)]) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (index, grad) in grads {
            if !model.is_trainable(*index) {
                return Err(Error::contract(format!(
                    "gradient supplied for frozen parameter {}",
                    model.parameters()[*index].name
                )));
            }
            let param = &mut model.params_mut()[*index];
            if grad.len() != param.value.numel() {
                return Err(Error::contract(format!("gradient length mismatch for {}", param.name)));
            }
            let decay = if param.value.shape().len() >= 2 { c.weight_decay } else { 0.0 };
            let (m, v) = self
                .moments
                .entry(*index)
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (((w, g), m), v) in param.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *w -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + decay * *w);
            }
        }
        Ok(())
    }
}
