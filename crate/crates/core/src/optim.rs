//! AdamW with decoupled weight decay and an exponential moving average of
//! parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::params::{ParamGrads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// First and second moment buffers, one per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Float> {
    pub config: AdamWConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<T>> = store.ids().map(|id| vec![T::ZERO; store.get(id).len()]).collect();
        Self { config, t: 0, m: zeros.clone(), v: zeros }
    }

    /// One update at learning rate `lr`. Parameters without a gradient are
    /// left untouched. Decay applies only to parameters flagged for it.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::invalid("adamw", "optimizer state does not match the parameter store"));
        }
        self.t += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (id, g) in &grads.0 {
            let decay = store.decays(*id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(*id).data_mut();
            if g.len() != p.len() {
                return Err(Error::shape("adamw", &[p.len()], &[g.len()]));
            }
            for i in 0..p.len() {
                let gi = g[i].to_f64();
                let mut pi = p[i].to_f64();
                if decay {
                    pi -= lr * weight_decay * pi;
                }
                let mi = beta1 * m[i].to_f64() + (1.0 - beta1) * gi;
                let vi = beta2 * v[i].to_f64() + (1.0 - beta2) * gi * gi;
                pi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                p[i] = T::from_f64(pi);
            }
        }
        Ok(())
    }
}

/// `shadow ← decay·shadow + (1 − decay)·params`, parameter by parameter.
pub fn ema_update<T: Float>(shadow: &mut ParamStore<T>, params: &ParamStore<T>, decay: f64) -> Result<()> {
    if shadow.len() != params.len() {
        return Err(Error::invalid("ema", "shadow does not match the parameter store"));
    }
    for id in params.ids() {
        let src = params.get(id).data();
        let dst = shadow.get_mut(id).data_mut();
        if src.len() != dst.len() {
            return Err(Error::shape("ema", &[dst.len()], &[src.len()]));
        }
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = T::from_f64(decay * d.to_f64() + (1.0 - decay) * s.to_f64());
        }
    }
    Ok(())
}
