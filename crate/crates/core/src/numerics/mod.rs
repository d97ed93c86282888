//! Dense array arithmetic, neural layer primitives, reverse-mode
//! differentiation, losses, the Nadam optimizer, and a finite-difference
//! gradient oracle.
//!
//! Everything is generic over [`Real`]: model state runs in `f32`, the
//! verification oracles instantiate the very same code in `f64`.

mod gradcheck;
mod loss;
mod ops;
mod optimizer;
mod tape;
mod tensor;

pub use gradcheck::{
    finite_diff_gradient, finite_diff_partial, relative_error, DEFAULT_FD_STEP,
};
pub use loss::{binary_cross_entropy, categorical_cross_entropy, LossValue, PROB_CLAMP_EPS};
pub use ops::{
    activate_on_tape, attention_on_tape, conv1d, dense, dense_on_tape, encoder_block,
    encoder_block_on_tape, maxpool1d, multi_head_attention, Activation, AttentionNodes,
    AttentionParams, EncoderNodes, EncoderParams,
};
pub use optimizer::{nadam_step, OptimizerState, NADAM_EPS};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type of tensors and tapes.
///
/// Implemented for `f32` (model state) and `f64` (oracles). `lit`
/// converts literal constants without the `NumCast` unwrap dance.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssignOps
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Real for f32 {
    fn lit(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(x: f32) -> Self {
        x
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    fn lit(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

/// SeLU scale constant.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// SeLU alpha constant.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

/// Scaled exponential linear unit.
pub fn selu<F: Real>(x: F) -> F {
    let lambda = F::lit(SELU_LAMBDA);
    let alpha = F::lit(SELU_ALPHA);
    if x > F::zero() {
        lambda * x
    } else {
        lambda * alpha * (x.exp() - F::one())
    }
}

/// Derivative of [`selu`] with respect to its input.
pub fn selu_grad<F: Real>(x: F) -> F {
    let lambda = F::lit(SELU_LAMBDA);
    let alpha = F::lit(SELU_ALPHA);
    if x > F::zero() {
        lambda
    } else {
        lambda * alpha * x.exp()
    }
}

/// Logistic sigmoid.
pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}
