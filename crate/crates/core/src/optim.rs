//! Adam with decoupled weight decay and an inverse square root schedule.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::ParamStore;

/// Linear warmup to `peak` over `warmup` steps, then `peak·√(warmup/step)`.
/// Steps count from 1.
pub fn inverse_sqrt_lr(peak: f64, warmup: u64, step: u64) -> f64 {
    let s = step.max(1) as f64;
    if warmup == 0 {
        return peak / libm::sqrt(s);
    }
    let w = warmup as f64;
    if s < w {
        peak * s / w
    } else {
        peak * libm::sqrt(w / s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = |s: &ParamStore| -> Vec<Matrix> {
            s.iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect()
        };
        Self {
            config,
            t: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    /// One update with learning rate `lr`; `grads` follows store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::LengthMismatch {
                op: "adam step",
                left: grads.len(),
                right: store.len(),
            });
        }
        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.t as f64);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.value_mut(id);
            let g = &grads[k];
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adam step",
                    expected: p.shape(),
                    got: g.shape(),
                });
            }
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * (mhat / (libm::sqrt(vhat) + eps) + weight_decay * *x);
            }
        }
        Ok(())
    }
}
