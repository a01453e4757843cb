//! Adamax: Adam with an infinity-norm second-moment accumulator.

use serde::{Deserialize, Serialize};

use super::NnError;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamaxConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub guard_eps: f64,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            guard_eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamaxState<T = f32> {
    pub m: Tensor<T>,
    pub u: Tensor<T>,
    pub t: u64,
    pub config: AdamaxConfig,
}

impl<T: Real> AdamaxState<T> {
    pub fn new(shape: &[usize], config: AdamaxConfig) -> Self {
        Self {
            m: Tensor::zeros(shape),
            u: Tensor::zeros(shape),
            t: 0,
            config,
        }
    }
}

/// One Adamax update of `params` in place:
/// `m ← β₁m + (1−β₁)g`, `u ← max(β₂u, |g|)`, `θ ← θ − α/(1−β₁ᵗ) · m/(u + ε)`.
pub fn adamax_step<T: Real>(params: &mut Tensor<T>, grads: &Tensor<T>, state: &mut AdamaxState<T>) -> Result<(), NnError> {
    params.same_shape(grads, "adamax")?;
    params.same_shape(&state.m, "adamax state")?;
    let cfg = state.config;
    state.t += 1;
    let step = T::lit(cfg.learning_rate / (1.0 - cfg.beta1.powf(state.t as f64)));
    let (b1, b2, eps) = (T::lit(cfg.beta1), T::lit(cfg.beta2), T::lit(cfg.guard_eps));
    let one_minus_b1 = T::one() - b1;
    for (((p, &g), m), u) in params
        .data_mut()
        .iter_mut()
        .zip(grads.data())
        .zip(state.m.data_mut())
        .zip(state.u.data_mut())
    {
        *m = b1 * *m + one_minus_b1 * g;
        *u = (b2 * *u).max(g.abs());
        *p -= step * *m / (*u + eps);
    }
    Ok(())
}
