//! Frame-level F1 and ROC AUC per AU.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct F1Scores {
    pub per_au: Vec<f64>,
    pub counts: Vec<Counts>,
    pub average: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AucScores {
    /// `None` where a column lacks positives or negatives.
    pub per_au: Vec<Option<f64>>,
    /// Mean over the defined columns.
    pub average: Option<f64>,
}

fn check_batch(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<usize> {
    if scores.is_empty() || labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let c = labels[0].len();
    if scores.len() != labels.len()
        || scores.iter().any(|r| r.len() != c)
        || labels.iter().any(|r| r.len() != c)
    {
        return Err(Error::Shape {
            op: "metrics",
            lhs: vec![scores.len(), scores[0].len()],
            rhs: vec![labels.len(), c],
        });
    }
    Ok(c)
}

/// F1 from counts with p = 0 when TP+FP = 0, r = 0 when TP+FN = 0 and
/// F1 = 0 when p + r = 0.
pub fn f1_from_counts(c: &Counts) -> f64 {
    let p = if c.tp + c.fp == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let r = if c.tp + c.fn_ == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-AU F1 at `threshold` (a score `>= threshold` counts as positive).
pub fn f1_scores(scores: &[Vec<f64>], labels: &[Vec<u8>], threshold: f64) -> Result<F1Scores> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Param(format!("F1 threshold must lie in (0, 1), got {threshold}")));
    }
    let c = check_batch(scores, labels)?;
    let mut counts = vec![Counts::default(); c];
    for (s_row, y_row) in scores.iter().zip(labels) {
        for k in 0..c {
            let pred = s_row[k] >= threshold;
            let truth = y_row[k] != 0;
            let slot = &mut counts[k];
            match (pred, truth) {
                (true, true) => slot.tp += 1,
                (true, false) => slot.fp += 1,
                (false, true) => slot.fn_ += 1,
                (false, false) => slot.tn += 1,
            }
        }
    }
    let per_au: Vec<f64> = counts.iter().map(f1_from_counts).collect();
    let average = per_au.iter().sum::<f64>() / c as f64;
    Ok(F1Scores {
        per_au,
        counts,
        average,
    })
}

/// Mann–Whitney AUC of one column: `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`, via
/// mid-ranks. `None` without both classes.
pub fn auc_column(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn auc_scores(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<AucScores> {
    let c = check_batch(scores, labels)?;
    let per_au: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
            let y: Vec<bool> = labels.iter().map(|r| r[k] != 0).collect();
            let auc = auc_column(&s, &y);
            if auc.is_none() {
                warn!("AUC undefined for label column {k}: only one class present");
            }
            auc
        })
        .collect();
    let defined: Vec<f64> = per_au.iter().flatten().copied().collect();
    let average = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(AucScores { per_au, average })
}
