//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{CerdError, Result};
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter, with a per-parameter step count.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Adam {
            config,
            m: store.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            t: vec![0; store.len()],
        }
    }

    pub fn steps(&self, index: usize) -> u64 {
        self.t[index]
    }

    /// Updates every parameter that received a gradient since the last step, then
    /// clears all gradients. Parameters no loss term touched keep value and state.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let bad = store
            .iter()
            .find(|p| p.touched && p.grad.iter().any(|g| !g.is_finite()))
            .map(|p| p.name.clone());
        if let Some(name) = bad {
            store.zero_grads();
            return Err(CerdError::Divergence(name));
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (i, p) in store.iter_mut().enumerate() {
            if !p.touched {
                continue;
            }
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((w, g), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&p.grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}
