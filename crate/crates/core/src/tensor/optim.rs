use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Adam moments and hyperparameters for an ordered list of parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Number of completed steps.
    pub t: u64,
    #[serde(skip)]
    pub m: Vec<Tensor>,
    #[serde(skip)]
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(learning_rate: f64, params: &[Tensor]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        adam_step(params, grads, self)
    }
}

/// Bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            &[params.len(), state.m.len()],
            &[grads.len()],
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if p.shape() != m.shape() {
            return Err(Error::shape("adam_step state", p.shape(), m.shape()));
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for i in 0..p.numel() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let update = state.learning_rate * (mi / c1) / ((vi / c2).sqrt() + state.epsilon);
            p.data_mut()[i] -= update;
        }
    }
    Ok(())
}

/// Plain gradient descent, in place.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    for (p, g) in params.iter_mut().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescale so the global L2 norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 || max_norm.is_nan() {
        return Err(Error::Argument(format!("max_norm must be > 0, got {max_norm}")));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}
