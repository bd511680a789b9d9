//! Bias-corrected adaptive-moment optimizer.

use super::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckMode {
    /// Validate gradients; non-finite values are an error.
    Checked,
    /// Skip validation; a non-finite gradient skips that tensor's
    /// update with a warning on stderr.
    Fast,
}

/// Per-parameter first/second moment estimates plus hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl AdamState {
    pub fn new(param_shapes: &[&Tensor], lr: f64) -> AdamState {
        AdamState {
            m: param_shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: param_shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }
}

/// One optimizer step over an aligned (params, grads) list.
///
/// Standard update: moments are exponential averages of g and g^2,
/// bias-corrected by 1/(1-beta^t), and each parameter moves by
/// `-lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
    mode: CheckMode,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);

    for (idx, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
        if param.shape() != grad.shape() {
            return Err(Error::shape(format!(
                "adam: param {idx} shape {:?} vs grad {:?}",
                param.shape(),
                grad.shape()
            )));
        }
        if let Err(e) = grad.validate_finite() {
            match mode {
                CheckMode::Checked => {
                    return Err(Error::NonFinite(format!("adam: gradient {idx}: {e}")))
                }
                CheckMode::Fast => {
                    eprintln!("warning: skipping update for param {idx}: non-finite gradient");
                    continue;
                }
            }
        }
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        let p = param.data_mut();
        let g = grad.data();
        for i in 0..p.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps_hat);
        }
    }
    Ok(())
}
