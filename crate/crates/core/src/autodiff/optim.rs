//! AdamW with decoupled weight decay over a [`ParamStore`].

use std::collections::BTreeMap;

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Per-parameter first/second moment estimates plus the shared step count.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW step. Parameters without a gradient entry are left untouched.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if cfg.lr <= 0.0 {
        return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, tensor) in params.map.iter_mut() {
        let g = match grads.get(name) {
            Some(g) => g,
            None => continue,
        };
        if g.len() != tensor.data.len() {
            return Err(Error::Dim(format!(
                "gradient for '{}' has {} values, parameter has {}",
                name,
                g.len(),
                tensor.data.len()
            )));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            // Decoupled decay: shrink the weight directly, not the gradient.
            tensor.data[i] -= cfg.lr * cfg.weight_decay * tensor.data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            tensor.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
