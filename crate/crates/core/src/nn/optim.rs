//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use super::tensor::Tensor;
use super::NnError;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(k, p)| (k.to_string(), Tensor::zeros(p.rows(), p.cols())))
                .collect()
        };
        Self { m: zeros(), v: zeros(), t: 0 }
    }
}

pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut OptimState<T>,
    cfg: &AdamWConfig,
) -> Result<(), NnError> {
    adamw_step_grouped(params, grads, state, cfg, |_| cfg.lr)
}

/// One AdamW step where the learning rate of each parameter is `lr_of(name)`.
pub fn adamw_step_grouped<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut OptimState<T>,
    cfg: &AdamWConfig,
    lr_of: impl Fn(&str) -> f64,
) -> Result<(), NnError> {
    if !grads.keys_match(params) || state.m.len() != params.len() {
        return Err(NnError::KeyMismatch("parameters, gradients and optimizer state differ".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let eps = T::of(cfg.eps);
    let wd = T::of(cfg.weight_decay);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);

    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let g = grads.get(&name).ok_or_else(|| NnError::KeyMismatch(name.clone()))?;
        let m = state.m.get_mut(&name).ok_or_else(|| NnError::KeyMismatch(name.clone()))?;
        let v = state.v.get_mut(&name).ok_or_else(|| NnError::KeyMismatch(name.clone()))?;
        let lr = T::of(lr_of(&name));
        let theta = params.values_mut(&name).ok_or_else(|| NnError::KeyMismatch(name.clone()))?;
        for (((th, &gi), mi), vi) in theta
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *th = *th - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *th);
        }
    }
    Ok(())
}
