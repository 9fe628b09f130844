//! Adam with polynomial learning-rate decay.

use super::checkpoint::Moments;
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::TensorMap;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub total_steps: u64,
    pub power: f64,
    pub batch_size: usize,
    /// Write a log line every this many steps (and after the last one).
    pub log_every: u64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr0: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, total_steps: 1000, power: 0.9, batch_size: 2, log_every: 10, seed: 0 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return Err(Error::config(format!("lr0 {} must be finite and >= 0", self.lr0)));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::config(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2)));
        }
        if !(self.eps > 0.0) || !(self.power >= 0.0) {
            return Err(Error::config("eps must be > 0 and power >= 0"));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::config("batch_size and log_every must be >= 1"));
        }
        Ok(())
    }
}

/// `lr0 · (1 − step/total)^power`, 0 from `total` on.
pub fn poly_lr(step: u64, oc: &OptimConfig) -> f64 {
    if step >= oc.total_steps {
        return 0.0;
    }
    oc.lr0 * (1.0 - step as f64 / oc.total_steps as f64).powf(oc.power)
}

/// One bias-corrected Adam update at learning rate `poly_lr(step)`. Every
/// tensor in `grads` must exist in `params` with the same shape; parameters
/// without a gradient are left alone. A non-finite gradient rejects the whole
/// step before anything is modified.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, moments: &mut Moments, oc: &OptimConfig, step: u64) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("gradient of `{name}` is {:?}, parameter is {:?}", g.shape(), p.shape())));
        }
        if !g.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient for `{name}` at step {step}")));
        }
    }
    moments.t += 1;
    let t = moments.t as i32;
    let lr = poly_lr(step, oc);
    let c1 = 1.0 - oc.beta1.powi(t);
    let c2 = 1.0 - oc.beta2.powi(t);
    for (name, g) in grads.iter() {
        if !moments.m.contains(name) {
            moments.m.insert(name, TensorMap::zeros(g.shape().to_vec()));
            moments.v.insert(name, TensorMap::zeros(g.shape().to_vec()));
        }
        let m = moments.m.get_mut(name).expect("inserted");
        for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = oc.beta1 * *mi + (1.0 - oc.beta1) * gi;
        }
        let v = moments.v.get_mut(name).expect("inserted with the first moment");
        for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = oc.beta2 * *vi + (1.0 - oc.beta2) * gi * gi;
        }
        let (m, v) = (moments.m.get(name).expect("present"), moments.v.get(name).expect("present"));
        let p = params.get_mut(name).expect("checked");
        for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            *pi -= lr * (mi / c1) / ((vi / c2).sqrt() + oc.eps);
        }
    }
    Ok(())
}
