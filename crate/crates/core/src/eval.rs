//! Evaluation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::PreparedSet;
use crate::error::{Error, Result};
use crate::graph::AdjacencyMode;
use crate::metrics::{auc_scores, f1_scores, Counts};
use crate::model::Batch;
use crate::objectives::ClassWeights;
use crate::rng::SeededRng;
use crate::train::model_from_checkpoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuResult {
    pub au: u32,
    pub f1: f64,
    /// Absent when the split lacks positives or negatives for this AU.
    pub auc: Option<f64>,
    pub counts: Counts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub samples: usize,
    pub threshold: f64,
    pub per_au: Vec<AuResult>,
    pub avg_f1: f64,
    pub avg_auc: Option<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub dice_eps: f64,
    pub relation_threshold: f64,
    pub adjacency_mode: AdjacencyMode,
    pub lr: f64,
    pub seed: u64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} ({} frames, threshold {})\n", self.dataset, self.samples, self.threshold);
        let _ = writeln!(out, "{:>6} {:>8} {:>8}", "AU", "F1", "AUC");
        for r in &self.per_au {
            let auc = r.auc.map_or("n/a".to_string(), |v| format!("{:.4}", v));
            let _ = writeln!(out, "{:>6} {:>8.4} {:>8}", format!("AU{}", r.au), r.f1, auc);
        }
        let avg_auc = self.avg_auc.map_or("n/a".to_string(), |v| format!("{:.4}", v));
        let _ = writeln!(out, "{:>6} {:>8.4} {:>8}", "Avg.", self.avg_f1, avg_auc);
        out
    }
}

fn batches(data: &PreparedSet, size: usize, rois: usize) -> Result<Vec<Batch>> {
    let idx: Vec<usize> = (0..data.examples.len()).collect();
    idx.chunks(size.max(1))
        .map(|chunk| {
            let samples: Vec<(&[Vec<f64>], &[u8])> = chunk
                .iter()
                .map(|&i| (data.examples[i].patches.as_slice(), data.examples[i].labels.as_slice()))
                .collect();
            Batch::assemble(&samples, rois)
        })
        .collect()
}

/// Per-frame probabilities with dropout disabled.
pub fn predict(checkpoint: &Checkpoint, data: &PreparedSet) -> Result<Vec<Vec<f64>>> {
    if data.examples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (model, g) = model_from_checkpoint(checkpoint)?;
    let mut rng = SeededRng::new(0);
    let mut out = Vec::with_capacity(data.examples.len());
    for batch in batches(data, checkpoint.config.batch_size, model.num_rois())? {
        let mut tape = Tape::new();
        let p = model.probs(&mut tape, &checkpoint.params, &g, &batch.patches, false, &mut rng)?;
        let p = tape.value(p);
        out.extend((0..p.rows()).map(|i| p.row(i).to_vec()));
    }
    Ok(out)
}

/// `L_au` over `data` with dropout disabled, averaged per frame.
pub fn eval_loss(checkpoint: &Checkpoint, data: &PreparedSet, weights: &ClassWeights) -> Result<f64> {
    let (model, g) = model_from_checkpoint(checkpoint)?;
    let cfg = &checkpoint.config;
    let mut rng = SeededRng::new(0);
    let mut total = 0.0;
    for batch in batches(data, cfg.batch_size, model.num_rois())? {
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, &checkpoint.params, &g, &batch, &weights.w, cfg.lambda2, cfg.dice_eps, false, &mut rng)?;
        total += tape.value(loss).value() * batch.len() as f64;
    }
    Ok(total / data.examples.len() as f64)
}

/// Report from precomputed scores.
pub fn report_from_scores(checkpoint: &Checkpoint, data: &PreparedSet, scores: &[Vec<f64>]) -> Result<EvalReport> {
    let cfg = &checkpoint.config;
    let labels = data.labels();
    let f1 = f1_scores(scores, &labels, cfg.f1_threshold)?;
    let auc = auc_scores(scores, &labels)?;
    let per_au = data
        .au_ids
        .iter()
        .enumerate()
        .map(|(k, &au)| AuResult {
            au,
            f1: f1.per_au[k],
            auc: auc.per_au[k],
            counts: f1.counts[k],
        })
        .collect();
    Ok(EvalReport {
        dataset: data.name.clone(),
        samples: data.examples.len(),
        threshold: cfg.f1_threshold,
        per_au,
        avg_f1: f1.average,
        avg_auc: auc.average,
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        dice_eps: cfg.dice_eps,
        relation_threshold: cfg.threshold,
        adjacency_mode: cfg.adjacency_mode,
        lr: cfg.lr,
        seed: cfg.seed,
    })
}

pub fn evaluate(checkpoint: &Checkpoint, data: &PreparedSet) -> Result<EvalReport> {
    let scores = predict(checkpoint, data)?;
    report_from_scores(checkpoint, data, &scores)
}
