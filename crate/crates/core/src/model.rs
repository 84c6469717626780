//! Encoders feeding the graph classifier: the stage-2 network.

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::gcn::GcnClassifier;
use crate::objectives::PROB_CLAMP;
use crate::representation::Autoencoders;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// A mini-batch in ROI-major layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `patches[r]` is `B×(n²·ch)` for ROI `r`.
    pub patches: Vec<Tensor>,
    /// `B×C` frame labels.
    pub labels: Tensor,
}

impl Batch {
    /// Stacks per-sample patch lists (`samples[b][r]`) and label vectors.
    /// Only the first `rois` patches of each sample are used.
    pub fn assemble(samples: &[(&[Vec<f64>], &[u8])], rois: usize) -> Result<Self> {
        let (first, _) = samples.first().ok_or(Error::EmptyBatch)?;
        if first.len() < rois {
            return Err(Error::Shape {
                op: "batch",
                lhs: vec![first.len()],
                rhs: vec![rois],
            });
        }
        let input = first[0].len();
        let b = samples.len();
        let mut patches = Vec::with_capacity(rois);
        for r in 0..rois {
            let mut data = Vec::with_capacity(b * input);
            for (p, _) in samples {
                data.extend_from_slice(&p[r]);
            }
            patches.push(Tensor::new(vec![b, input], data)?);
        }
        let c = samples[0].1.len();
        let labels = samples.iter().flat_map(|(_, y)| y.iter().map(|&v| v as f64)).collect();
        Ok(Self {
            patches,
            labels: Tensor::new(vec![b, c], labels)?,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-ROI encoders, two graph convolutions and the FCN head.
#[derive(Clone, Debug, PartialEq)]
pub struct AuGcn {
    pub encoders: Autoencoders,
    pub gcn: GcnClassifier,
}

impl AuGcn {
    pub fn num_rois(&self) -> usize {
        self.gcn.dims.rois
    }

    /// Parameters updated in stage 2: encoders of the active ROIs, the graph
    /// layers and the head. Decoders and ROI heads stay frozen.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.encoders.rois[..self.num_rois()]
            .iter()
            .flat_map(|ae| ae.encoder_ids())
            .collect();
        ids.extend(self.gcn.ids());
        ids
    }

    /// `B×C` probabilities.
    pub fn probs(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        g: &Tensor,
        patches: &[Tensor],
        train: bool,
        rng: &mut SeededRng,
    ) -> Result<Var> {
        let r = self.num_rois();
        if g.shape() != [r, r] {
            return Err(Error::Shape {
                op: "graph",
                lhs: g.shape().to_vec(),
                rhs: vec![r, r],
            });
        }
        if patches.len() < r {
            return Err(Error::Shape {
                op: "patches",
                lhs: vec![patches.len()],
                rhs: vec![r],
            });
        }
        let latents = (0..r)
            .map(|roi| {
                let x = tape.input(patches[roi].clone());
                self.encoders.encode_var(tape, store, roi, x)
            })
            .collect::<Result<Vec<_>>>()?;
        let b = patches[0].rows();
        let z0 = (0..b)
            .map(|s| {
                let rows: Vec<(Var, usize)> = latents.iter().map(|&z| (z, s)).collect();
                tape.gather_rows(&rows)
            })
            .collect::<Result<Vec<_>>>()?;
        let gv = tape.input(g.clone());
        self.gcn.forward_batch(tape, store, gv, &z0, train, rng)
    }

    /// `L_au = weighted BCE + λ2 · weighted Dice`, each averaged over samples.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        g: &Tensor,
        batch: &Batch,
        weights: &[f64],
        lambda2: f64,
        dice_eps: f64,
        train: bool,
        rng: &mut SeededRng,
    ) -> Result<Var> {
        let p = self.probs(tape, store, g, &batch.patches, train, rng)?;
        let bce = tape.weighted_bce(p, &batch.labels, weights, PROB_CLAMP)?;
        let dice = tape.weighted_dice(p, &batch.labels, weights, dice_eps)?;
        let dice = tape.scale(dice, lambda2);
        tape.add(bce, dice)
    }
}
