//! Relation-aware multi-label action unit (AU) detection.
//!
//! The pipeline crops one patch per facial region of interest (ROI), encodes
//! each patch with its own autoencoder, propagates the latent vectors over an
//! ROI relation graph built from AU co-occurrence statistics, and classifies
//! the refined node features with a fully connected head.
//!
//! Module map:
//!
//! - [`tensor`], [`autodiff`], [`rng`], [`gradcheck`]: dense f64 arithmetic,
//!   reverse-mode gradients, seeded randomness and finite-difference checks.
//! - [`roi`]: AU centers from landmarks, patch extraction and ROI layouts.
//! - [`graph`]: co-occurrence estimation and ROI adjacency assembly.
//! - [`representation`]: per-ROI autoencoders and their stage-1 losses.
//! - [`gcn`]: graph convolution layers and the classification head.
//! - [`objectives`], [`metrics`]: weighted BCE / Dice losses, F1 and AUC.
//! - [`config`], [`data`], [`synth`], [`optim`], [`train`], [`checkpoint`],
//!   [`eval`]: the training and evaluation pipeline.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gcn;
pub mod gradcheck;
pub mod graph;
pub mod image_io;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod representation;
pub mod rng;
pub mod roi;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;
