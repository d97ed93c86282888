//! Central finite-difference gradient oracle.
//!
//! Always evaluated in `f64`: the forward difference cancels most leading
//! digits, so 32-bit evaluation would drown the quotient in rounding
//! noise at `h = 1e-4`.

use super::Tensor;
use crate::{HctError, Result};

/// Default perturbation step.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

fn eval_checked<E>(eval: &mut E, params: &[Tensor<f64>]) -> Result<f64>
where
    E: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    let y = eval(params)?;
    if !y.is_finite() {
        return Err(HctError::Oracle(format!("non-finite objective value {y}")));
    }
    Ok(y)
}

/// Central finite differences `(f(p+h) - f(p-h)) / 2h` for every
/// coordinate of every parameter tensor.
pub fn finite_diff_gradient<E>(
    mut eval: E,
    params: &[Tensor<f64>],
    h: f64,
) -> Result<Vec<Tensor<f64>>>
where
    E: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Tensor::zeros(params[pi].shape().to_vec());
        for ei in 0..params[pi].numel() {
            g[ei] = central_difference(&mut eval, &mut work, pi, ei, h)?;
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Central finite differences at selected `(parameter, element)`
/// coordinates only; the full sweep is quadratic in model size and not
/// needed when spot-checking a large network.
pub fn finite_diff_partial<E>(
    mut eval: E,
    params: &[Tensor<f64>],
    coords: &[(usize, usize)],
    h: f64,
) -> Result<Vec<f64>>
where
    E: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    coords
        .iter()
        .map(|&(pi, ei)| central_difference(&mut eval, &mut work, pi, ei, h))
        .collect()
}

fn central_difference<E>(
    eval: &mut E,
    work: &mut [Tensor<f64>],
    pi: usize,
    ei: usize,
    h: f64,
) -> Result<f64>
where
    E: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    let orig = work[pi][ei];
    work[pi][ei] = orig + h;
    let plus = eval_checked(eval, work);
    work[pi][ei] = orig - h;
    let minus = eval_checked(eval, work);
    work[pi][ei] = orig;
    Ok((plus? - minus?) / (2.0 * h))
}

/// Relative disagreement between two gradient estimates; values both
/// below 1e-8 in magnitude compare as equal.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-8 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}
