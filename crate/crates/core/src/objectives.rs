//! Losses: cross-entropy, the causal selection loss and their weighted sum.
//!
//! Every loss comes with its gradient with respect to the probabilities it
//! reads; chain through [`crate::scalar::softmax_backward`] to reach logits.

use serde::{Deserialize, Serialize};

use crate::distribution::ClassDistribution;
use crate::error::{CatxError, Result};
use crate::scalar::Scalar;

/// Floor applied to probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub sel: f64,
    pub lambda: f64,
}

fn clamped_ln<T: Scalar>(p: T) -> T {
    p.max(T::from_f64(LOG_EPS)).ln()
}

/// `Σ_y p_full(y) · ln max(p_removed(y), ε)`, on raw probability rows.
///
/// Minimizing it drives the prediction on the blacked-out input away from
/// the classes the full input supports.
pub fn selection_loss_probs<T: Scalar>(p_full: &[T], p_removed: &[T]) -> Result<T> {
    if p_full.len() != p_removed.len() {
        return Err(CatxError::shape(format!(
            "{} full-input classes vs {} removed-input classes",
            p_full.len(),
            p_removed.len()
        )));
    }
    Ok(p_full.iter().zip(p_removed).map(|(&w, &p)| w * clamped_ln(p)).sum())
}

/// Gradient of [`selection_loss_probs`] with respect to `p_removed`.
/// `p_full` is a constant target.
pub fn selection_loss_grad<T: Scalar>(p_full: &[T], p_removed: &[T]) -> Vec<T> {
    let eps = T::from_f64(LOG_EPS);
    p_full
        .iter()
        .zip(p_removed)
        .map(|(&w, &p)| if p > eps { w / p } else { T::zero() })
        .collect()
}

pub fn selection_loss<T: Scalar>(p_full: &ClassDistribution<T>, p_removed: &ClassDistribution<T>) -> Result<T> {
    selection_loss_probs(&p_full.probs, &p_removed.probs)
}

/// `-ln max(p(label), ε)`.
pub fn cross_entropy_probs<T: Scalar>(probs: &[T], label: usize) -> Result<T> {
    let p = probs.get(label).ok_or(CatxError::Index {
        index: label,
        len: probs.len(),
    })?;
    Ok(-clamped_ln(*p))
}

/// Gradient of [`cross_entropy_probs`] with respect to the probabilities.
pub fn cross_entropy_grad<T: Scalar>(probs: &[T], label: usize) -> Vec<T> {
    let mut g = vec![T::zero(); probs.len()];
    if probs[label] > T::from_f64(LOG_EPS) {
        g[label] = -T::one() / probs[label];
    }
    g
}

pub fn cross_entropy<T: Scalar>(p: &ClassDistribution<T>, label: usize) -> Result<T> {
    cross_entropy_probs(&p.probs, label)
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CatxError::config(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// `λ · ce + (1 - λ) · sel`.
pub fn combined_loss(ce: f64, sel: f64, lambda: f64) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    Ok(LossBreakdown {
        total: lambda * ce + (1.0 - lambda) * sel,
        ce,
        sel,
        lambda,
    })
}

/// Arithmetic mean, the batch reduction used for every loss.
pub fn batch_mean<T: Scalar>(values: &[T]) -> T {
    if values.is_empty() {
        return T::zero();
    }
    values.iter().copied().sum::<T>() / T::from_f64(values.len() as f64)
}
