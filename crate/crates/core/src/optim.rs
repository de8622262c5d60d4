//! Adam with bias correction and the two learning-rate schedules.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;

use crate::real::Real;
use crate::tensor::{ParamSet, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::range("lr", self.lr, ">= 0"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::range(name, b, "[0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::range("eps", self.eps, "> 0"));
        }
        Ok(())
    }
}

/// First and second moments per parameter tensor, in `ParamSet` order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new<P: ParamSet<F>>(params: &P) -> Self {
        let m: Vec<Tensor<F>> = params.tensors().into_iter().map(|(_, t)| t.zeros_like()).collect();
        Self { v: m.clone(), m, step: 0 }
    }

    pub fn matches<P: ParamSet<F>>(&self, params: &P) -> bool {
        let ts = params.tensors();
        ts.len() == self.m.len()
            && ts.len() == self.v.len()
            && ts.iter().zip(self.m.iter().zip(&self.v)).all(|((_, p), (m, v))| p.shape == m.shape && p.shape == v.shape)
    }
}

/// One Adam update with learning rate `lr`.
///
/// Non-finite gradients abort before anything is modified.
pub fn adam_step<F: Real, P: ParamSet<F>>(params: &mut P, grads: &P, state: &mut AdamState<F>, cfg: &AdamConfig, lr: f64) -> Result<()> {
    if !state.matches(params) || !state.matches(grads) {
        return Err(Error::Config("optimizer state does not match the parameters".into()));
    }
    for (name, g) in grads.tensors() {
        if let Some(i) = g.data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name} at element {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::from_f64(cfg.beta1), F::from_f64(cfg.beta2));
    let c1 = F::from_f64(1.0 - cfg.beta1.powi(t));
    let c2 = F::from_f64(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (F::from_f64(lr), F::from_f64(cfg.eps));
    let one = F::one();
    let gs: Vec<&Tensor<F>> = grads.tensors().into_iter().map(|(_, t)| t).collect();
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(gs).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (one - b1) * gi;
            v.data[i] = b2 * v.data[i] + (one - b2) * gi * gi;
            let mh = m.data[i] / c1;
            let vh = v.data[i] / c2;
            p.data[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

/// Stage 1: constant `base`. Stage 2: `base * (1 - step / total)`.
pub fn lr_schedule(stage: Stage, step: u64, total: u64, base: f64) -> Result<f64> {
    if step > total {
        return Err(Error::range("step", step, format!("0..={total}")));
    }
    Ok(match stage {
        Stage::One => base,
        Stage::Two if step == total => 0.0,
        Stage::Two => base * (1.0 - step as f64 / total as f64),
    })
}
