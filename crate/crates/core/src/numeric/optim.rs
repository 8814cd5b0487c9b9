//! Adam with a staircase exponential learning-rate decay.

use crate::error::{Error, Result};
use crate::numeric::params::ParamStore;
use crate::numeric::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier applied to the learning rate every `decay_interval` steps.
    pub decay_rate: f64,
    pub decay_interval: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_rate: 0.7,
            decay_interval: 5000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let first = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        let second = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    /// Learning rate used by the next step.
    pub fn effective_lr(&self) -> f64 {
        let c = &self.config;
        let interval = c.decay_interval.max(1);
        c.base_lr * c.decay_rate.powi((self.step / interval) as i32)
    }

    /// Apply one update from the gradients held in `store`. Rejects the
    /// whole step (leaving parameters and moments untouched) if any
    /// gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::shape(
                "adam_step",
                format!("state tracks {} params, store has {}", self.first.len(), store.len()),
            ));
        }
        for (i, (_, p)) in store.iter().enumerate() {
            if p.grad.shape() != self.first[i].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{}: {:?} vs moment {:?}", p.name, p.grad.shape(), self.first[i].shape()),
                ));
            }
            if p.trainable && !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        let lr = self.effective_lr();
        let c = self.config;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}
