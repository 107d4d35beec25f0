use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

/// Learning rate for layer `layer_index` of `n_layers` (0 = bottom):
/// `base_lr · beta^(n_layers − 1 − layer_index)`.
pub fn layerwise_lr(layer_index: usize, n_layers: usize, base_lr: f64, beta: f64) -> Result<f64> {
    if !(beta > 0.0) || beta > 1.0 {
        return Err(Error::Config(format!(
            "layer decay beta must be in (0, 1], got {beta}"
        )));
    }
    if layer_index >= n_layers {
        return Err(Error::Config(format!(
            "layer index {layer_index} out of range for {n_layers} layers"
        )));
    }
    let depth = (n_layers - 1 - layer_index) as i32;
    Ok(base_lr * beta.powi(depth))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay. Moment buffers are indexed by
/// parameter position in the store and created lazily.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, index: usize) -> Option<(&[f64], &[f64])> {
        match (self.first.get(index), self.second.get(index)) {
            (Some(Some(m)), Some(Some(v))) => Some((m, v)),
            _ => None,
        }
    }

    /// One update of every trainable parameter holding a gradient, then
    /// zeroes all gradients. A non-finite gradient aborts before any
    /// parameter changes.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (_, p) in store.iter() {
            if p.trainable {
                if let Some(g) = p.tensor.grad() {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NanGradient(p.name.clone()));
                    }
                }
            }
        }
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (index, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let lr = c.lr * p.lr_scale;
            let n = grad.len();
            let m = self.first[index].get_or_insert_with(|| vec![0.0; n]);
            let v = self.second[index].get_or_insert_with(|| vec![0.0; n]);
            let values = p.tensor.values_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                values[i] -= lr * c.weight_decay * values[i];
                values[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}
