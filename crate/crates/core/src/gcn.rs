//! Two graph-convolution layers and the fully connected AU head.
//!
//! `Z1 = ReLU(dropout(G·Z0·W0))`, `Z2 = ReLU(dropout(G·Z1·W1))`, then
//! `Ŷ = sigmoid(flat(Z2)·W_fc + b_fc)` with `flat` row-major (node, feature).

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::representation::glorot_uniform;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GcnDims {
    pub rois: usize,
    pub d0: usize,
    pub d1: usize,
    pub d2: usize,
    pub classes: usize,
}

impl GcnDims {
    pub fn flat_len(&self) -> usize {
        self.rois * self.d2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnClassifier {
    pub dims: GcnDims,
    pub w0: ParamId,
    pub w1: ParamId,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
    pub dropout: f64,
}

impl GcnClassifier {
    pub fn init(store: &mut ParamStore, dims: GcnDims, dropout: f64, rng: &mut SeededRng) -> Self {
        let w0 = store.insert("gcn.w0", glorot_uniform(dims.d0, dims.d1, rng));
        let w1 = store.insert("gcn.w1", glorot_uniform(dims.d1, dims.d2, rng));
        let fc_w = store.insert("fcn.w", glorot_uniform(dims.flat_len(), dims.classes, rng));
        let fc_b = store.insert("fcn.b", Tensor::zeros(&[1, dims.classes]));
        Self { dims, w0, w1, fc_w, fc_b, dropout }
    }

    pub fn bind(store: &ParamStore, rois: usize, dropout: f64) -> Result<Self> {
        let w0 = store.require("gcn.w0")?;
        let w1 = store.require("gcn.w1")?;
        let fc_w = store.require("fcn.w")?;
        let fc_b = store.require("fcn.b")?;
        let shape = |id: ParamId| store.get(id).value.shape().to_vec();
        let dims = GcnDims {
            rois,
            d0: shape(w0)[0],
            d1: shape(w0)[1],
            d2: shape(w1)[1],
            classes: shape(fc_w)[1],
        };
        if shape(fc_w)[0] != dims.flat_len() {
            return Err(Error::Shape {
                op: "fcn",
                lhs: shape(fc_w),
                rhs: vec![dims.flat_len(), dims.classes],
            });
        }
        Ok(Self { dims, w0, w1, fc_w, fc_b, dropout })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w0, self.w1, self.fc_w, self.fc_b]
    }

    /// Per-sample `R×d0` latent blocks → `B×C` probabilities.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        g: Var,
        z0: &[Var],
        train: bool,
        rng: &mut SeededRng,
    ) -> Result<Var> {
        if z0.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let w0 = tape.param(store, self.w0);
        let w1 = tape.param(store, self.w1);
        let mut flats = Vec::with_capacity(z0.len());
        for &z in z0 {
            let z1 = gcn_layer(tape, g, z, w0, self.dropout, train, rng)?;
            let z2 = gcn_layer(tape, g, z1, w1, self.dropout, train, rng)?;
            flats.push((tape.reshape(z2, &[1, self.dims.flat_len()])?, 0));
        }
        let x = tape.gather_rows(&flats)?;
        let fw = tape.param(store, self.fc_w);
        let fb = tape.param(store, self.fc_b);
        let logits = tape.matmul(x, fw)?;
        let logits = tape.add_row_bias(logits, fb)?;
        Ok(tape.sigmoid(logits))
    }

    /// Single-sample prediction outside training.
    pub fn forward(&self, store: &ParamStore, g: &Tensor, z0: &Tensor, train: bool, rng: &mut SeededRng) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let gv = tape.input(g.clone());
        let zv = tape.input(z0.clone());
        let p = self.forward_batch(&mut tape, store, gv, &[zv], train, rng)?;
        Ok(tape.value(p).data().to_vec())
    }
}

/// `ReLU(dropout(G·Z·W))`, products taken left to right.
pub fn gcn_layer(tape: &mut Tape, g: Var, z: Var, w: Var, rate: f64, train: bool, rng: &mut SeededRng) -> Result<Var> {
    let gz = tape.matmul(g, z)?;
    let h = tape.matmul(gz, w)?;
    let h = tape.dropout(h, rate, train, rng)?;
    Ok(tape.relu(h))
}

/// Tensor-level [`gcn_layer`].
pub fn gcn_layer_eval(g: &Tensor, z: &Tensor, w: &Tensor, rate: f64, train: bool, rng: &mut SeededRng) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (gv, zv, wv) = (tape.input(g.clone()), tape.input(z.clone()), tape.input(w.clone()));
    let out = gcn_layer(&mut tape, gv, zv, wv, rate, train, rng)?;
    Ok(tape.value(out).clone())
}
