//! Per-ROI autoencoders and the ROI-level supervision used in stage 1.
//!
//! Each ROI owns an encoder `n²·ch → hidden → d0` (affine, ReLU, affine), a
//! decoder `d0 → hidden → n²·ch` (affine, ReLU, affine, sigmoid) and a linear
//! head `d0 → C` with a sigmoid. Parameters are named `roi{r:02}.{layer}.{w,b}`.

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::objectives::PROB_CLAMP;
use crate::rng::SeededRng;
use crate::roi::RoiLayout;
use crate::tensor::Tensor;

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.uniform_range(-limit, limit)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("length matches")
}

/// Affine map `x·W + b` over row-major batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Self {
        let w = store.insert(format!("{name}.w"), glorot_uniform(fan_in, fan_out, rng));
        let b = store.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
        Self { w, b }
    }

    pub fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            w: store.require(&format!("{name}.w"))?,
            b: store.require(&format!("{name}.b"))?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let h = tape.matmul(x, w)?;
        tape.add_row_bias(h, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AeDims {
    /// Flattened patch length `n²·ch`.
    pub input: usize,
    pub hidden: usize,
    pub latent: usize,
    pub classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoiAutoencoder {
    pub enc1: Dense,
    pub enc2: Dense,
    pub dec1: Dense,
    pub dec2: Dense,
    pub head: Dense,
}

impl RoiAutoencoder {
    pub fn encoder_ids(&self) -> Vec<ParamId> {
        [self.enc1.ids(), self.enc2.ids()].concat()
    }
}

/// One independent autoencoder per ROI.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoders {
    pub dims: AeDims,
    pub rois: Vec<RoiAutoencoder>,
}

const LAYERS: [&str; 5] = ["enc1", "enc2", "dec1", "dec2", "head"];

pub fn roi_prefix(roi: usize) -> String {
    format!("roi{roi:02}")
}

impl Autoencoders {
    pub fn init(store: &mut ParamStore, num_rois: usize, dims: AeDims, rng: &mut SeededRng) -> Self {
        let rois = (0..num_rois)
            .map(|r| {
                let p = roi_prefix(r);
                let shapes = [
                    (dims.input, dims.hidden),
                    (dims.hidden, dims.latent),
                    (dims.latent, dims.hidden),
                    (dims.hidden, dims.input),
                    (dims.latent, dims.classes),
                ];
                let mut layers = LAYERS
                    .iter()
                    .zip(shapes)
                    .map(|(name, (i, o))| Dense::init(store, &format!("{p}.{name}"), i, o, rng));
                let mut next = || layers.next().expect("five layers");
                RoiAutoencoder {
                    enc1: next(),
                    enc2: next(),
                    dec1: next(),
                    dec2: next(),
                    head: next(),
                }
            })
            .collect();
        Self { dims, rois }
    }

    /// Resolves the parameters of `num_rois` autoencoders already in `store`.
    pub fn bind(store: &ParamStore, num_rois: usize) -> Result<Self> {
        let mut rois = Vec::with_capacity(num_rois);
        for r in 0..num_rois {
            let p = roi_prefix(r);
            let layer = |name: &str| Dense::bind(store, &format!("{p}.{name}"));
            rois.push(RoiAutoencoder {
                enc1: layer("enc1")?,
                enc2: layer("enc2")?,
                dec1: layer("dec1")?,
                dec2: layer("dec2")?,
                head: layer("head")?,
            });
        }
        let first = rois.first().ok_or_else(|| Error::Param("no autoencoders".into()))?;
        let shape = |id: ParamId| store.get(id).value.shape().to_vec();
        let dims = AeDims {
            input: shape(first.enc1.w)[0],
            hidden: shape(first.enc1.w)[1],
            latent: shape(first.enc2.w)[1],
            classes: shape(first.head.w)[1],
        };
        Ok(Self { dims, rois })
    }

    pub fn num_rois(&self) -> usize {
        self.rois.len()
    }

    fn roi(&self, roi: usize) -> Result<&RoiAutoencoder> {
        self.rois
            .get(roi)
            .ok_or_else(|| Error::Param(format!("roi_id {roi} out of range (R = {})", self.rois.len())))
    }

    /// `B×input → B×d0`.
    pub fn encode_var(&self, tape: &mut Tape, store: &ParamStore, roi: usize, x: Var) -> Result<Var> {
        let ae = self.roi(roi)?;
        let h = ae.enc1.apply(tape, store, x)?;
        let h = tape.relu(h);
        ae.enc2.apply(tape, store, h)
    }

    /// `B×d0 → B×input`, sigmoid outputs.
    pub fn decode_var(&self, tape: &mut Tape, store: &ParamStore, roi: usize, z: Var) -> Result<Var> {
        let ae = self.roi(roi)?;
        let h = ae.dec1.apply(tape, store, z)?;
        let h = tape.relu(h);
        let out = ae.dec2.apply(tape, store, h)?;
        Ok(tape.sigmoid(out))
    }

    /// `B×d0 → B×C` ROI-level probabilities.
    pub fn head_var(&self, tape: &mut Tape, store: &ParamStore, roi: usize, z: Var) -> Result<Var> {
        let ae = self.roi(roi)?;
        let logits = ae.head.apply(tape, store, z)?;
        Ok(tape.sigmoid(logits))
    }

    fn check_patch(&self, patch: &Tensor) -> Result<()> {
        if patch.len() != self.dims.input {
            return Err(Error::Shape {
                op: "encode",
                lhs: patch.shape().to_vec(),
                rhs: vec![self.dims.input],
            });
        }
        Ok(())
    }

    /// Latent vector of one `n×n×ch` patch.
    pub fn encode(&self, store: &ParamStore, patch: &Tensor, roi: usize) -> Result<Vec<f64>> {
        self.roi(roi)?;
        self.check_patch(patch)?;
        let mut tape = Tape::new();
        let x = tape.input(patch.reshape(&[1, self.dims.input])?);
        let z = self.encode_var(&mut tape, store, roi, x)?;
        Ok(tape.value(z).data().to_vec())
    }

    /// Reconstruction of one latent vector, shaped like the original patch.
    pub fn decode(&self, store: &ParamStore, latent: &[f64], roi: usize, patch_shape: &[usize]) -> Result<Tensor> {
        self.roi(roi)?;
        if latent.len() != self.dims.latent {
            return Err(Error::Shape {
                op: "decode",
                lhs: vec![latent.len()],
                rhs: vec![self.dims.latent],
            });
        }
        let mut tape = Tape::new();
        let z = tape.input(Tensor::row_vector(latent.to_vec()));
        let out = self.decode_var(&mut tape, store, roi, z)?;
        tape.value(out).reshape(patch_shape)
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        self.rois.iter().flat_map(|ae| ae.encoder_ids()).collect()
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        self.rois
            .iter()
            .flat_map(|ae| [ae.enc1, ae.enc2, ae.dec1, ae.dec2, ae.head])
            .flat_map(|d| d.ids())
            .collect()
    }

    /// Stage-1 objective on a batch: `patches[r]` is `B×input` for ROI `r`,
    /// `roi_labels[r]` is `B×C`. Returns `(L_ROI, L_R, L_cls)` nodes, each a
    /// mean over ROIs.
    pub fn stage1_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        patches: &[Tensor],
        roi_labels: &[Tensor],
        lambda1: f64,
    ) -> Result<(Var, Var, Var)> {
        let r = self.rois.len();
        if patches.len() != r || roi_labels.len() != r {
            return Err(Error::Shape {
                op: "stage1_loss",
                lhs: vec![patches.len(), roi_labels.len()],
                rhs: vec![r],
            });
        }
        let ones = vec![1.0; self.dims.classes];
        let mut recon_terms = Vec::with_capacity(r);
        let mut cls_terms = Vec::with_capacity(r);
        for roi in 0..r {
            let x = tape.input(patches[roi].clone());
            let z = self.encode_var(tape, store, roi, x)?;
            let rec = self.decode_var(tape, store, roi, z)?;
            recon_terms.push(tape.l1_mean(rec, &patches[roi])?);
            let p = self.head_var(tape, store, roi, z)?;
            cls_terms.push(tape.weighted_bce(p, &roi_labels[roi], &ones, PROB_CLAMP)?);
        }
        let recon = mean_of(tape, &recon_terms)?;
        let cls = mean_of(tape, &cls_terms)?;
        let scaled = tape.scale(recon, lambda1);
        let total = tape.add(cls, scaled)?;
        Ok((total, recon, cls))
    }
}

pub(crate) fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms.split_first().ok_or(Error::EmptyBatch)?;
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

/// Pixel L1: mean absolute difference over all entries (per-channel means
/// averaged over channels).
pub fn recon_loss(gt: &Tensor, recon: &Tensor) -> Result<f64> {
    if gt.shape() != recon.shape() {
        return Err(Error::Shape {
            op: "recon_loss",
            lhs: gt.shape().to_vec(),
            rhs: recon.shape().to_vec(),
        });
    }
    if gt.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let total: f64 = gt.data().iter().zip(recon.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / gt.len() as f64)
}

/// `R×C` ROI labels: `Y[j]` where AU `j` belongs to ROI `i`, else 0; the
/// global row is `Y`.
pub fn roi_label_matrix(y: &[u8], layout: &RoiLayout) -> Result<Tensor> {
    let c = layout.num_aus();
    if y.len() != c {
        return Err(Error::Shape {
            op: "roi_label_matrix",
            lhs: vec![y.len()],
            rhs: vec![c],
        });
    }
    let r = layout.num_rois();
    let mut m = Tensor::zeros(&[r, c]);
    let global = layout.global_index();
    for roi in 0..r {
        for (j, &v) in y.iter().enumerate() {
            if v != 0 && (Some(roi) == global || layout.belongs(j, roi)) {
                m.set(roi, j, 1.0);
            }
        }
    }
    Ok(m)
}

/// Mean over ROIs of `−(1/C) Σ_c [Y log Ŷ + (1−Y) log(1−Ŷ)]`, Ŷ clamped.
pub fn roi_softmax_loss(y_roi: &Tensor, yhat_roi: &Tensor) -> Result<f64> {
    if y_roi.shape() != yhat_roi.shape() || y_roi.shape().len() != 2 {
        return Err(Error::Shape {
            op: "roi_softmax_loss",
            lhs: y_roi.shape().to_vec(),
            rhs: yhat_roi.shape().to_vec(),
        });
    }
    let ones = vec![1.0; y_roi.cols()];
    Ok(crate::autodiff::bce_value(yhat_roi, y_roi, &ones, PROB_CLAMP))
}

/// `L_ROI = cls + λ1 · recon`.
pub fn roi_total_loss(recon: f64, roi_cls: f64, lambda1: f64) -> f64 {
    roi_cls + lambda1 * recon
}
