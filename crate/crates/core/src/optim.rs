//! Bias-corrected Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn for_params(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> =
            (0..params.len()).map(|i| Tensor::zeros(params.value(i).shape())).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One descent step. Decoupled weight decay shrinks the parameter before the
/// Adam delta: p <- p - lr*wd*p - lr * m_hat / (sqrt(v_hat) + eps).
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam_step: {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", params.name(i))));
        }
    }
    state.t += 1;
    let t = state.t;
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.value_mut(i).data_mut();
        for j in 0..p.len() {
            p[j] -= lr * weight_decay * p[j];
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    let norm_sq: f64 = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}
