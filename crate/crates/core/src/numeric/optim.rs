use serde::{Deserialize, Serialize};

use super::{Array, ParamStore};
use crate::error::{Error, Result};

/// Adam with bias correction. Moments are kept per parameter in store order;
/// non-trainable entries are skipped.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Array>,
    pub second_moment: Vec<Array>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self::with_betas(store, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |_: ()| -> Vec<Array> { store.iter().map(|(_, p)| Array::zeros(p.value.shape())).collect() };
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first_moment: zeros(()),
            second_moment: zeros(()),
        }
    }

    /// Applies one update with learning rate `lr` using the gradients held
    /// in the store. Fails before touching any value if a gradient is not
    /// finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable && !p.grad.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient for parameter `{}`", p.name)));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = self.first_moment[k].data_mut();
            let v = self.second_moment[k].data_mut();
            for ((w, &g), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing with warm restarts, evaluated at a (possibly
/// fractional) epoch position. Cycle `i` lasts `t0 * t_mult^i` epochs and
/// decays from `lr0` toward zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineWarmRestarts {
    pub lr0: f64,
    pub t0: f64,
    pub t_mult: f64,
}

impl CosineWarmRestarts {
    pub fn new(lr0: f64, t0: f64, t_mult: f64) -> Result<Self> {
        if !(lr0 > 0.0 && lr0.is_finite()) {
            return Err(Error::Argument(format!("initial learning rate must be positive, got {lr0}")));
        }
        if !(t0 > 0.0) || !(t_mult >= 1.0) {
            return Err(Error::Argument(format!("invalid restart periods T_0={t0}, T_mult={t_mult}")));
        }
        Ok(Self { lr0, t0, t_mult })
    }

    pub fn lr_at(&self, t: f64) -> f64 {
        cosine_warm_restarts(self.lr0, self.t0, self.t_mult, t)
    }
}

pub fn cosine_warm_restarts(lr0: f64, t0: f64, t_mult: f64, t: f64) -> f64 {
    let mut start = 0.0;
    let mut period = t0;
    while t >= start + period {
        start += period;
        period *= t_mult;
    }
    let t_cur = (t - start).max(0.0);
    lr0 * (1.0 + (std::f64::consts::PI * t_cur / period).cos()) / 2.0
}
