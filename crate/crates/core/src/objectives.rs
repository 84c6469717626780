//! Multi-label training objectives.
//!
//! The per-class terms are binary cross-entropies weighted by inverse
//! occurrence rate, plus a weighted soft Dice term. Tape versions used during
//! training live on [`crate::autodiff::Tape`] (`weighted_bce`,
//! `weighted_dice`); the functions here evaluate a single prediction.

use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_value, dice_value};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability clamp used in every log term.
pub const PROB_CLAMP: f64 = 1e-7;

/// Default Dice smoothing term.
pub const DEFAULT_DICE_EPS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w: Vec<f64>,
    pub rates: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(c: usize) -> Self {
        Self {
            w: vec![1.0; c],
            rates: vec![1.0; c],
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// Per-AU positive rate of an `N×C` 0/1 label matrix.
pub fn occurrence_rates(labels: &[Vec<u8>]) -> Result<Vec<f64>> {
    let first = labels.first().ok_or(Error::EmptyBatch)?;
    let c = first.len();
    let mut counts = vec![0usize; c];
    for row in labels {
        for (k, &v) in row.iter().enumerate().take(c) {
            counts[k] += usize::from(v != 0);
        }
    }
    Ok(counts.iter().map(|&n| n as f64 / labels.len() as f64).collect())
}

/// `w_i = (1/r_i)·C / Σ_j (1/r_j)`; the weights sum to C.
pub fn class_weights(rates: &[f64], au_ids: &[u32]) -> Result<ClassWeights> {
    if let Some(i) = rates.iter().position(|&r| r.is_nan() || r <= 0.0) {
        let au = au_ids.get(i).copied().unwrap_or(i as u32);
        return Err(Error::DegenerateRate { au });
    }
    let c = rates.len() as f64;
    let inv_sum: f64 = rates.iter().map(|r| 1.0 / r).sum();
    Ok(ClassWeights {
        w: rates.iter().map(|r| (1.0 / r) * c / inv_sum).collect(),
        rates: rates.to_vec(),
    })
}

fn as_row(values: &[f64]) -> Tensor {
    Tensor::row_vector(values.to_vec())
}

fn check_lengths(y: &[f64], yhat: &[f64], w: &ClassWeights) -> Result<()> {
    if y.len() != yhat.len() || y.len() != w.len() {
        return Err(Error::Shape {
            op: "objective",
            lhs: vec![y.len(), yhat.len()],
            rhs: vec![w.len()],
        });
    }
    Ok(())
}

/// `−(1/C) Σ w_i [Y_i log Ŷ_i + (1−Y_i) log(1−Ŷ_i)]`, Ŷ clamped to
/// `[1e-7, 1 − 1e-7]`.
pub fn weighted_softmax_loss(y: &[f64], yhat: &[f64], w: &ClassWeights) -> Result<f64> {
    check_lengths(y, yhat, w)?;
    Ok(bce_value(&as_row(yhat), &as_row(y), &w.w, PROB_CLAMP))
}

/// `(1/C) Σ w_i (1 − (2 Y_i Ŷ_i + ε) / (Y_i² + Ŷ_i² + ε))`.
pub fn dice_loss(y: &[f64], yhat: &[f64], w: &ClassWeights, eps: f64) -> Result<f64> {
    check_lengths(y, yhat, w)?;
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Param(format!("Dice smoothing must be > 0, got {eps}")));
    }
    Ok(dice_value(&as_row(yhat), &as_row(y), &w.w, eps))
}

/// `L_au = softmax + λ2 · dice`.
pub fn au_loss(softmax: f64, dice: f64, lambda2: f64) -> f64 {
    softmax + lambda2 * dice
}
