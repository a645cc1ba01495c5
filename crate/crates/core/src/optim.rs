//! Adam and exponential moving averages over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::nn::{Grads, ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, like: &ParamStore<T>) -> Self {
        Self { cfg, m: like.zeros_like(), v: like.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step = T::lit(c.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        let it = params
            .iter_scalars_mut()
            .zip(grads.iter_scalars())
            .zip(self.m.iter_scalars_mut().zip(self.v.iter_scalars_mut()));
        for ((p, &g), (m, v)) in it {
            *m = b1 * *m + ob1 * g;
            *v = b2 * *v + ob2 * g * g;
            *p -= step * *m / ((*v * inv_bc2).sqrt() + eps);
        }
    }
}

/// `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update<T: Real>(ema: &mut ParamStore<T>, params: &ParamStore<T>, decay: f64) {
    let (d, od) = (T::lit(decay), T::lit(1.0 - decay));
    for (e, &p) in ema.iter_scalars_mut().zip(params.iter_scalars()) {
        *e = d * *e + od * p;
    }
}
