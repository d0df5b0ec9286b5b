//! Adam optimizer with bias correction, plus global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::model::ParamStore;

use super::TrainError;

/// Optimizer hyperparameters. Defaults follow the training config defaults:
/// lr 3e-4, betas (0.9, 0.98), eps 1e-9.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First/second moment estimates per parameter name, plus the step counter
/// used for bias correction. Entries appear lazily the first time a parameter
/// receives a gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Global L2 norm over every gradient buffer, accumulated in 64-bit.
pub fn global_grad_norm(grads: &BTreeMap<String, Vec<f32>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&g| {
            let g = g as f64;
            g * g
        })
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients in place so their global norm does not exceed
/// `max_norm`. Returns the pre-clip norm. Gradients at or under the limit are
/// left untouched (bitwise).
pub fn clip_gradients(grads: &mut BTreeMap<String, Vec<f32>>, max_norm: f32) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm as f64 {
        let scale = (max_norm as f64 / norm) as f32;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// One Adam update over every parameter that has a gradient entry. Bias
/// correction is applied via the shared step counter, which increments once
/// per call. Any non-finite gradient halts with an error naming the parameter
/// and the reported step.
pub fn adam_step(
    store: &mut ParamStore<f32>,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut AdamState,
    hyper: &AdamHyper,
    step: u64,
) -> Result<(), TrainError> {
    for (name, grad) in grads {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGrad {
                param: name.clone(),
                step,
            });
        }
        let numel = store
            .get(name)
            .ok_or_else(|| TrainError::UnknownParam { param: name.clone() })?
            .numel();
        if numel != grad.len() {
            return Err(TrainError::GradShape {
                param: name.clone(),
                expected: numel,
                actual: grad.len(),
            });
        }
    }
    state.t += 1;
    let t = state.t;
    let bias1 = 1.0 - hyper.beta1.powi(t as i32);
    let bias2 = 1.0 - hyper.beta2.powi(t as i32);
    for (name, grad) in grads {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let param = store
            .get_mut(name)
            .expect("validated above")
            .data_mut();
        for i in 0..grad.len() {
            let g = grad[i];
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            param[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}
