//! Adaptive-moment parameter updates.

use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamStore<T>) -> Self {
        let m: Vec<Vec<T>> = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Adam { cfg, step: 0, v: m.clone(), m }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update; `grads` is aligned with `params` order.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape("adam", format!("{} grads for {} params", grads.len(), self.m.len())));
        }
        self.step += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let lr = T::lit(self.cfg.lr);
        let eps = T::lit(self.cfg.eps);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (c1t, c2t) = (T::lit(c1), T::lit(c2));
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            if g.len() != p.numel() {
                return Err(Error::shape("adam", format!("grad {i} has {} values, param has {}", g.len(), p.numel())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1t * m[j] + (T::one() - b1t) * g[j];
                v[j] = b2t * v[j] + (T::one() - b2t) * g[j] * g[j];
                let mhat = m[j] / c1t;
                let vhat = v[j] / c2t;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
