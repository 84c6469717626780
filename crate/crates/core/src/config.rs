//! Training hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AdjacencyMode, DEFAULT_THRESHOLD};
use crate::objectives::DEFAULT_DICE_EPS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Dataset configuration name (`bp4d`, `disfa`, `toy`).
    pub dataset: String,
    /// ROI side in pixels.
    pub n: usize,
    pub channels: usize,
    /// Autoencoder hidden width.
    pub hidden: usize,
    pub d0: usize,
    pub d1: usize,
    pub d2: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Relation threshold on the symmetrized co-occurrence matrix.
    pub threshold: f64,
    pub dice_eps: f64,
    pub dropout: f64,
    pub lr: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub lr_period: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub seed: u64,
    pub adjacency_mode: AdjacencyMode,
    pub f1_threshold: f64,
}

impl TrainConfig {
    /// Full-size settings: 19/14 ROIs of 25×25 RGB, d = 150/30/12.
    pub fn full(dataset: &str) -> Self {
        Self {
            dataset: dataset.to_string(),
            n: 25,
            channels: 3,
            hidden: 256,
            d0: 150,
            d1: 30,
            d2: 12,
            lambda1: 3.0,
            lambda2: 4.0,
            threshold: DEFAULT_THRESHOLD,
            dice_eps: DEFAULT_DICE_EPS,
            dropout: 0.5,
            lr: 0.01,
            lr_decay: 0.1,
            lr_period: 10,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 256,
            stage1_epochs: 12,
            stage2_epochs: 40,
            seed: 0,
            adjacency_mode: AdjacencyMode::Raw,
            f1_threshold: 0.5,
        }
    }

    /// Desk-scale settings on the 6-ROI toy layout. Raw adjacency products
    /// drive the narrow graph layers into dead ReLUs here, so this preset
    /// normalizes G and uses lighter dropout.
    pub fn desk() -> Self {
        Self {
            dataset: "toy".to_string(),
            n: 12,
            channels: 1,
            d0: 16,
            d1: 8,
            d2: 4,
            batch_size: 8,
            dropout: 0.2,
            adjacency_mode: AdjacencyMode::Symmetric,
            ..Self::full("toy")
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "bp4d" => Ok(Self::full("bp4d")),
            "disfa" => Ok(Self::full("disfa")),
            other => Err(Error::Config(format!("unknown config preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n", self.n),
            ("channels", self.channels),
            ("hidden", self.hidden),
            ("d0", self.d0),
            ("d1", self.d1),
            ("d2", self.d2),
            ("lr_period", self.lr_period),
            ("batch_size", self.batch_size),
            ("stage1_epochs", self.stage1_epochs),
            ("stage2_epochs", self.stage2_epochs),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{name}` must be positive")));
        }
        let reals = [
            ("lambda1", self.lambda1, true),
            ("lambda2", self.lambda2, true),
            ("threshold", self.threshold, false),
            ("dice_eps", self.dice_eps, false),
            ("lr", self.lr, false),
            ("lr_decay", self.lr_decay, false),
            ("momentum", self.momentum, true),
            ("weight_decay", self.weight_decay, true),
        ];
        for (name, v, zero_ok) in reals {
            if !v.is_finite() || v < 0.0 || (!zero_ok && v == 0.0) {
                return Err(Error::Config(format!("`{name}` = {v} is out of range")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        if !(self.f1_threshold > 0.0 && self.f1_threshold < 1.0) {
            return Err(Error::Config("f1_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Patch length fed to each encoder.
    pub fn input_len(&self) -> usize {
        self.n * self.n * self.channels
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
