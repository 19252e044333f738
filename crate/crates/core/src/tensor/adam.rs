use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

/// Adam hyperparameters. Defaults follow the common (lr 3e-4, 0.9/0.999)
/// setting used across all models in this project.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam optimizer state aligned index-for-index with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        let v = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { config, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. `grads` must align with the store
    /// (as produced by `Gradients::by_param`).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam: {} grads for {} params",
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = &grads[i];
            if g.shape() != store.value(id).shape() {
                return Err(Error::ShapeMismatch(format!(
                    "adam: grad {:?} vs param {:?} for {}",
                    g.shape(),
                    store.value(id).shape(),
                    store.name(id)
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = store.value_mut(id);
            for ((mw, vw), (pw, gw)) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut())
                .zip(p.data_mut().iter_mut().zip(g.data()))
            {
                *mw = c.beta1 * *mw + (1.0 - c.beta1) * gw;
                *vw = c.beta2 * *vw + (1.0 - c.beta2) * gw * gw;
                let m_hat = *mw / bc1;
                let v_hat = *vw / bc2;
                *pw -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    /// First/second moment buffers for a parameter index (test hook).
    pub fn moments(&self, index: usize) -> (&Tensor, &Tensor) {
        (&self.m[index], &self.v[index])
    }
}
