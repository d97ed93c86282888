//! Nadam: Adam with a Nesterov-style momentum term in the update.
//!
//! Pinned update rule, applied with the step counter incremented first:
//!
//! ```text
//! m <- b1 m + (1-b1) g            v <- b2 v + (1-b2) g^2
//! m_hat = m / (1 - b1^t)          v_hat = v / (1 - b2^t)
//! theta <- theta - a (b1 m_hat + (1-b1) g / (1 - b1^t)) / (sqrt(v_hat) + eps)
//! ```

use super::{Real, Tensor};
use crate::{HctError, Result};

pub const NADAM_EPS: f64 = 1e-8;

/// Moment estimates and hyperparameters for one parameter array.
#[derive(Debug, Clone)]
pub struct OptimizerState<F: Real = f32> {
    pub m: Tensor<F>,
    pub v: Tensor<F>,
    pub t: u64,
    pub alpha: F,
    pub beta1: F,
    pub beta2: F,
    pub epsilon: F,
}

impl<F: Real> OptimizerState<F> {
    /// Fresh zero-moment state for a parameter of the given shape.
    ///
    /// `beta1` may be zero (the momentum-free reduction); both decay rates
    /// must stay below one.
    pub fn new(shape: &[usize], alpha: F, beta1: F, beta2: F) -> Result<Self> {
        let (b1, b2) = (beta1.to_f64(), beta2.to_f64());
        if !(0.0..1.0).contains(&b1) {
            return Err(HctError::Config(format!("beta1 {b1} outside [0,1)")));
        }
        if !(0.0 < b2 && b2 < 1.0) {
            return Err(HctError::Config(format!("beta2 {b2} outside (0,1)")));
        }
        Ok(OptimizerState {
            m: Tensor::zeros(shape.to_vec()),
            v: Tensor::zeros(shape.to_vec()),
            t: 0,
            alpha,
            beta1,
            beta2,
            epsilon: F::lit(NADAM_EPS),
        })
    }
}

/// One Nadam update of `params` in place, given the loss gradient.
pub fn nadam_step<F: Real>(
    params: &mut Tensor<F>,
    grads: &Tensor<F>,
    state: &mut OptimizerState<F>,
) -> Result<()> {
    if params.shape() != grads.shape() || params.shape() != state.m.shape() {
        return Err(HctError::Contract(format!(
            "nadam shapes differ: params {:?}, grads {:?}, state {:?}",
            params.shape(),
            grads.shape(),
            state.m.shape()
        )));
    }
    state.t += 1;
    let one = F::one();
    let b1 = state.beta1;
    let b2 = state.beta2;
    let bias1 = one - b1.powi(state.t as i32);
    let bias2 = one - b2.powi(state.t as i32);

    let m = state.m.data_mut();
    let v = state.v.data_mut();
    let p = params.data_mut();
    let g = grads.data();
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        let nesterov = b1 * m_hat + (one - b1) * g[i] / bias1;
        p[i] = p[i] - state.alpha * nesterov / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}
