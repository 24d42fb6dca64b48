//! AdamW with global-norm clipping and a step learning-rate schedule.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use vtg_core::autograd::Gradients;
use vtg_core::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied only to parameters flagged for decay.
    pub weight_decay: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: 0.1,
        }
    }
}

/// Learning rate for a 0-based epoch: `base` until `decay_epoch` epochs have
/// run, `base * factor` afterwards.
pub fn step_lr(base: f64, epoch: usize, decay_epoch: usize, factor: f64) -> f64 {
    if decay_epoch > 0 && epoch >= decay_epoch {
        base * factor
    } else {
        base
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

/// What one optimizer step saw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Array2::zeros(p.value.raw_dim())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update at learning rate `lr`. Parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> StepInfo {
        let c = self.config;
        let grad_norm = global_norm(grads);
        let scale = if c.grad_clip > 0.0 && grad_norm > c.grad_clip {
            c.grad_clip / grad_norm
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let decay = store.get(id).decay;
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            match grads.param(id) {
                Some(g) => {
                    m.zip_mut_with(g, |m, g| *m = c.beta1 * *m + (1.0 - c.beta1) * g * scale);
                    v.zip_mut_with(g, |v, g| {
                        let g = g * scale;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    });
                }
                None => {
                    m.mapv_inplace(|x| c.beta1 * x);
                    v.mapv_inplace(|x| c.beta2 * x);
                }
            }
            let w = store.value_mut(id);
            if decay && c.weight_decay > 0.0 {
                w.mapv_inplace(|x| x * (1.0 - lr * c.weight_decay));
            }
            ndarray::Zip::from(w).and(&*m).and(&*v).for_each(|w, m, v| {
                *w -= lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
            });
        }
        StepInfo {
            grad_norm,
            clipped: scale < 1.0,
        }
    }
}

pub fn global_norm(grads: &Gradients) -> f64 {
    grads
        .params()
        .iter()
        .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}
