//! Standalone classification losses.
//!
//! These are the reference entry points used by evaluation and tests; the
//! training loop records the same formulas through the tape so gradients
//! flow. Predicted probabilities are clamped to `[EPS, 1-EPS]` before the
//! logarithm.

use super::Real;
use crate::{HctError, Result};

/// Probability clamp applied before `log` in both losses.
pub const PROB_CLAMP_EPS: f64 = 1e-7;

/// A computed loss: the scalar mean plus its per-sample contributions.
#[derive(Debug, Clone)]
pub struct LossValue<F: Real = f32> {
    /// Mean loss over the batch.
    pub total: F,
    /// One contribution per sample; `total` is their mean.
    pub per_sample: Vec<F>,
    /// Batch size.
    pub samples: usize,
    /// Class count; 2 for the binary loss.
    pub classes: usize,
}

fn clamp<F: Real>(p: F) -> F {
    let eps = F::lit(PROB_CLAMP_EPS);
    p.max(eps).min(F::one() - eps)
}

/// Mean binary cross-entropy of predicted PD probabilities against 0/1
/// labels.
pub fn binary_cross_entropy<F: Real>(pred: &[F], labels: &[u8]) -> Result<LossValue<F>> {
    if pred.is_empty() {
        return Err(HctError::EmptyBatch);
    }
    if pred.len() != labels.len() {
        return Err(HctError::Shape(format!(
            "{} predictions vs {} labels",
            pred.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&a| a > 1) {
        return Err(HctError::Validation("binary labels must be 0 or 1".into()));
    }
    let one = F::one();
    let per_sample: Vec<F> = pred
        .iter()
        .zip(labels.iter())
        .map(|(&p, &a)| {
            let p = clamp(p);
            let a = F::lit(a as f64);
            -(a * p.ln() + (one - a) * (one - p).ln())
        })
        .collect();
    let total = per_sample.iter().cloned().sum::<F>() / F::lit(per_sample.len() as f64);
    Ok(LossValue {
        total,
        samples: pred.len(),
        per_sample,
        classes: 2,
    })
}

/// Mean categorical cross-entropy of probability rows against class
/// indices. Each row of `pred` must hold `classes` probabilities summing
/// to 1 within 1e-5.
pub fn categorical_cross_entropy<F: Real>(
    pred: &[F],
    labels: &[usize],
    classes: usize,
) -> Result<LossValue<F>> {
    if labels.is_empty() {
        return Err(HctError::EmptyBatch);
    }
    if classes == 0 || pred.len() != labels.len() * classes {
        return Err(HctError::Shape(format!(
            "{} prediction values vs {} samples x {classes} classes",
            pred.len(),
            labels.len()
        )));
    }
    let one = F::one();
    let mut per_sample = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(HctError::Validation(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = &pred[i * classes..(i + 1) * classes];
        let sum: F = row.iter().cloned().sum();
        if (sum - one).abs().to_f64() > 1e-5 {
            return Err(HctError::Validation(format!(
                "prediction row {i} sums to {sum}, expected 1"
            )));
        }
        per_sample.push(-clamp(row[label]).ln());
    }
    let total = per_sample.iter().cloned().sum::<F>() / F::lit(per_sample.len() as f64);
    Ok(LossValue {
        total,
        samples: labels.len(),
        per_sample,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN_2: f64 = std::f64::consts::LN_2;

    #[test]
    fn bce_confident_correct_is_near_zero() {
        let p = 1.0 - PROB_CLAMP_EPS;
        let loss = binary_cross_entropy::<f64>(&[p], &[1]).unwrap();
        assert!(loss.total.abs() < 1e-6, "loss = {}", loss.total);
    }

    #[test]
    fn bce_coin_flip_is_ln_two() {
        let loss = binary_cross_entropy::<f64>(&[0.5], &[1]).unwrap();
        assert!((loss.total - LN_2).abs() < 1e-9);
        let loss = binary_cross_entropy::<f64>(&[0.5, 0.5], &[0, 1]).unwrap();
        assert!((loss.total - LN_2).abs() < 1e-9);
    }

    #[test]
    fn bce_rejects_empty_batch() {
        assert!(matches!(
            binary_cross_entropy::<f64>(&[], &[]),
            Err(HctError::EmptyBatch)
        ));
    }

    #[test]
    fn cce_matching_one_hot_is_near_zero() {
        let loss =
            categorical_cross_entropy::<f64>(&[1.0 - 2e-7, 1e-7, 1e-7], &[0], 3).unwrap();
        assert!(loss.total.abs() < 1e-6);
    }

    #[test]
    fn cce_uniform_is_ln_three() {
        let third = 1.0 / 3.0;
        for label in 0..3 {
            let loss =
                categorical_cross_entropy::<f64>(&[third, third, third], &[label], 3).unwrap();
            assert!((loss.total - 3f64.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn cce_mean_of_two_samples() {
        let pred = [0.7, 0.2, 0.1, 0.1, 0.6, 0.3];
        let l0 = categorical_cross_entropy::<f64>(&pred[..3], &[0], 3).unwrap();
        let l1 = categorical_cross_entropy::<f64>(&pred[3..], &[2], 3).unwrap();
        let both = categorical_cross_entropy::<f64>(&pred, &[0, 2], 3).unwrap();
        assert!((both.total - (l0.total + l1.total) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cce_rejects_unnormalized_rows() {
        let err = categorical_cross_entropy::<f64>(&[0.5, 0.2, 0.1], &[0], 3);
        assert!(matches!(err, Err(HctError::Validation(_))));
    }

    #[test]
    fn total_is_mean_of_contributions() {
        let loss = binary_cross_entropy::<f64>(&[0.3, 0.8, 0.6], &[0, 1, 0]).unwrap();
        let mean: f64 = loss.per_sample.iter().sum::<f64>() / 3.0;
        assert!((loss.total - mean).abs() < 1e-12);
        assert!(loss.total >= 0.0);
    }

    #[test]
    fn bce_equals_two_class_cce() {
        // one-hot expansion of a binary label makes the two formulas coincide
        let mut rng_state = 0x1234_5678_u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..1000 {
            let p = 0.001 + 0.998 * next();
            let label = if next() < 0.5 { 0u8 } else { 1u8 };
            let bce = binary_cross_entropy::<f64>(&[p], &[label]).unwrap().total;
            let cce = categorical_cross_entropy::<f64>(&[1.0 - p, p], &[label as usize], 2)
                .unwrap()
                .total;
            assert!((bce - cce).abs() < 1e-6, "p={p} label={label}");
        }
    }
}
