use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::OptimizerConfig;
use crate::error::{Error, Result};
use crate::numerics::ParamStore;

/// Adaptive-moment update with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// Moments in parameter-store order, keyed by name.
    pub first: Vec<(String, Vec<f64>)>,
    pub second: Vec<(String, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: &OptimizerConfig, store: &ParamStore) -> Self {
        let zeros: Vec<(String, Vec<f64>)> = store
            .iter()
            .map(|(_, p)| (p.name.clone(), vec![0.0; p.value.len()]))
            .collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// `p ← p − lr·(m̂ / (√v̂ + ε) + wd·p)` using the store's gradients.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, (_, m)), (_, v)) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for k in 0..value.len() {
                let g = grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                value[k] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * value[k]);
            }
            if !p.value.is_finite() {
                return Err(Error::NonFinite("optimizer update"));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}
