//! Adam and the polynomial learning-rate schedule.

use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> AdamMoments<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
        }
    }
}

/// One bias-corrected Adam update of `param` in place. `t` is the 1-based
/// step count.
pub fn adam_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamMoments<T>,
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for other in [grad.shape(), state.m.shape(), state.v.shape()] {
        if other != param.shape() {
            return Err(Error::shapes("adam_step", param.shape(), other));
        }
    }
    if t == 0 {
        return Err(Error::Contract("adam_step counts steps from 1".into()));
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - Float::powi(b1, t as i32);
    let bc2 = 1.0 - Float::powi(b2, t as i32);
    let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
    let step = T::from_f64(lr / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let eps = T::from_f64(cfg.eps);
    let p = param.data_mut();
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (i, &g) in grad.data().iter().enumerate() {
        m[i] = b1t * m[i] + one_b1 * g;
        v[i] = b2t * v[i] + one_b2 * g * g;
        p[i] = p[i] - step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
    }
    Ok(())
}

/// Adam over every trainable entry of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<AdamMoments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(ps: &ParamStore<T>, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: ps.iter().map(|(_, p)| AdamMoments::zeros(p.value.shape())).collect(),
        }
    }

    /// Applies the gradients currently held by the store.
    pub fn update(&mut self, ps: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.moments.len() != ps.len() {
            return Err(Error::Contract("optimizer state does not match parameter store".into()));
        }
        self.step += 1;
        for (p, state) in ps.iter_mut().zip(&mut self.moments) {
            if p.trainable {
                adam_step(&mut p.value, &p.grad, state, self.step, lr, &self.config)?;
            }
        }
        Ok(())
    }
}

/// Polynomial decay `lr0 * (1 - t / T)^0.9` for epoch `t` in `[0, T)`.
pub fn lr_at(t: usize, lr0: f64, total: usize) -> Result<f64> {
    if t >= total {
        return Err(Error::Contract(alloc::format!(
            "epoch {t} is outside the schedule of {total} epochs"
        )));
    }
    Ok(lr0 * Float::powf(1.0 - t as f64 / total as f64, 0.9))
}
