//! The two training stages.
//!
//! Stage 1 fits the per-ROI autoencoders and ROI heads on `L_ROI`. Stage 2
//! reuses the encoders, adds the graph layers and FCN head, and trains them
//! end to end on `L_au` with decoders and ROI heads frozen. Both stages use
//! SGD with momentum and a step learning-rate schedule; batch order and
//! dropout masks come from seeded streams, so a seed fixes every byte of the
//! resulting checkpoints.

use log::{debug, info};

use crate::autodiff::{ParamStore, Tape};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::PreparedSet;
use crate::error::{Error, Result};
use crate::gcn::{GcnClassifier, GcnDims};
use crate::graph::{normalize_adjacency, AdjacencyMatrix};
use crate::model::{AuGcn, Batch};
use crate::objectives::{class_weights, occurrence_rates, ClassWeights};
use crate::optim::{lr_at_epoch, SgdConfig, SgdState};
use crate::representation::{roi_label_matrix, AeDims, Autoencoders};
use crate::rng::SeededRng;
use crate::roi::RoiLayout;
use crate::tensor::Tensor;

/// Sub-streams of the run seed.
const STREAM_STAGE1_INIT: u64 = 1;
const STREAM_STAGE1_TRAIN: u64 = 2;
const STREAM_STAGE2_INIT: u64 = 3;
const STREAM_STAGE2_TRAIN: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
}

fn check_data(data: &PreparedSet, config: &TrainConfig, rois: usize) -> Result<()> {
    if data.examples.is_empty() {
        return Err(Error::EmptyManifest);
    }
    if data.input_len() != config.input_len() {
        return Err(Error::Config(format!(
            "patches are {}x{}x{} but the config expects {}x{}x{}",
            data.n, data.n, data.channels, config.n, config.n, config.channels
        )));
    }
    if data.num_rois < rois {
        return Err(Error::Config(format!("data has {} ROIs, the model needs {rois}", data.num_rois)));
    }
    Ok(())
}

/// Shuffled index batches for one epoch.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn batch_of(data: &PreparedSet, indices: &[usize], rois: usize) -> Result<Batch> {
    let samples: Vec<(&[Vec<f64>], &[u8])> = indices
        .iter()
        .map(|&i| (data.examples[i].patches.as_slice(), data.examples[i].labels.as_slice()))
        .collect();
    Batch::assemble(&samples, rois)
}

fn velocity_named(store: &ParamStore, state: &SgdState) -> Vec<(String, Tensor)> {
    store
        .iter()
        .zip(&state.velocity)
        .map(|((name, _), v)| (name.to_string(), v.clone()))
        .collect()
}

fn check_finite(loss: f64, stage: u8, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { stage, epoch, loss })
    }
}

/// Stage 1: per-ROI autoencoders on `L_ROI = L_cls + λ1·L_R`. `on_epoch`
/// receives the checkpoint after every epoch.
pub fn train_stage1(
    data: &PreparedSet,
    layout: &RoiLayout,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let r = layout.num_rois();
    check_data(data, config, r)?;
    if data.au_ids != layout.au_ids {
        return Err(Error::Config("data and layout AU lists differ".into()));
    }
    let root = SeededRng::new(config.seed);
    let mut init_rng = root.fork(STREAM_STAGE1_INIT);
    let mut rng = root.fork(STREAM_STAGE1_TRAIN);

    let mut store = ParamStore::new();
    let dims = AeDims {
        input: config.input_len(),
        hidden: config.hidden,
        latent: config.d0,
        classes: layout.num_aus(),
    };
    let encoders = Autoencoders::init(&mut store, r, dims, &mut init_rng);
    let trainable = encoders.all_ids();
    let mut sgd = SgdState::zeros(&store);

    let roi_labels: Vec<Tensor> = data
        .examples
        .iter()
        .map(|e| roi_label_matrix(&e.labels, layout))
        .collect::<Result<_>>()?;

    let mut history = Vec::with_capacity(config.stage1_epochs);
    let mut checkpoint = None;
    for epoch in 0..config.stage1_epochs {
        let lr = lr_at_epoch(config.lr, config.lr_decay, config.lr_period, epoch);
        let step = SgdConfig {
            lr,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
        };
        let mut total = 0.0;
        let batches = epoch_batches(data.examples.len(), config.batch_size, &mut rng);
        for idx in &batches {
            let batch = batch_of(data, idx, r)?;
            let labels: Vec<Tensor> = (0..r)
                .map(|roi| {
                    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| roi_labels[i].row(roi).to_vec()).collect();
                    Tensor::from_rows(&rows)
                })
                .collect::<Result<_>>()?;
            store.zero_grad();
            let mut tape = Tape::new();
            let (loss, _, _) = encoders.stage1_loss(&mut tape, &store, &batch.patches, &labels, config.lambda1)?;
            let value = tape.value(loss).value();
            check_finite(value, 1, epoch)?;
            tape.backward(loss, &mut store)?;
            sgd.step(&mut store, &trainable, step)?;
            total += value;
        }
        let loss = total / batches.len() as f64;
        check_finite(loss, 1, epoch)?;
        info!("stage 1 epoch {}/{}: lr {lr:e}, L_ROI {loss:.6}", epoch + 1, config.stage1_epochs);
        history.push(EpochLog { epoch, lr, loss });
        let ck = Checkpoint {
            config: config.clone(),
            stage: 1,
            epoch: (epoch + 1) as u32,
            rng: rng.state(),
            params: store.clone(),
            velocity: velocity_named(&store, &sgd),
            adjacency: None,
        };
        on_epoch(&ck)?;
        checkpoint = Some(ck);
    }
    Ok(TrainOutcome {
        checkpoint: checkpoint.expect("at least one epoch"),
        history,
    })
}

/// Class weights from the label rates of `data`.
pub fn training_weights(data: &PreparedSet) -> Result<ClassWeights> {
    class_weights(&occurrence_rates(&data.labels())?, &data.au_ids)
}

/// Stage 2: encoders + graph layers + FCN on `L_au`. The graph size fixes the
/// number of ROIs used; the first `R` patches of each example feed it.
pub fn train_stage2(
    stage1: &Checkpoint,
    data: &PreparedSet,
    adjacency: &AdjacencyMatrix,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let r = adjacency.size();
    check_data(data, config, r)?;
    let s1 = &stage1.config;
    if (s1.n, s1.channels, s1.hidden, s1.d0) != (config.n, config.channels, config.hidden, config.d0) {
        return Err(Error::Config(format!(
            "stage-1 checkpoint (n={}, ch={}, hidden={}, d0={}) does not match the config",
            s1.n, s1.channels, s1.hidden, s1.d0
        )));
    }
    let mut store = stage1.params.clone();
    let encoders = Autoencoders::bind(&store, r).map_err(|e| {
        Error::Config(format!("graph has {r} nodes but the stage-1 checkpoint lacks matching encoders: {e}"))
    })?;
    if encoders.dims.classes != data.au_ids.len() {
        return Err(Error::Config("stage-1 checkpoint was trained for a different AU count".into()));
    }
    let root = SeededRng::new(config.seed);
    let mut init_rng = root.fork(STREAM_STAGE2_INIT);
    let mut rng = root.fork(STREAM_STAGE2_TRAIN);
    let dims = GcnDims {
        rois: r,
        d0: config.d0,
        d1: config.d1,
        d2: config.d2,
        classes: data.au_ids.len(),
    };
    let gcn = GcnClassifier::init(&mut store, dims, config.dropout, &mut init_rng);
    let model = AuGcn { encoders, gcn };
    let trainable = model.trainable_ids();
    let mut sgd = SgdState::zeros(&store);
    let g = normalize_adjacency(adjacency, config.adjacency_mode).g;
    let weights = training_weights(data)?;
    debug!("class weights {:?}", weights.w);

    let mut history = Vec::with_capacity(config.stage2_epochs);
    let mut checkpoint = None;
    for epoch in 0..config.stage2_epochs {
        let lr = lr_at_epoch(config.lr, config.lr_decay, config.lr_period, epoch);
        let step = SgdConfig {
            lr,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
        };
        let mut total = 0.0;
        let batches = epoch_batches(data.examples.len(), config.batch_size, &mut rng);
        for idx in &batches {
            let batch = batch_of(data, idx, r)?;
            store.zero_grad();
            let mut tape = Tape::new();
            let loss = model.loss(&mut tape, &store, &g, &batch, &weights.w, config.lambda2, config.dice_eps, true, &mut rng)?;
            let value = tape.value(loss).value();
            check_finite(value, 2, epoch)?;
            tape.backward(loss, &mut store)?;
            sgd.step(&mut store, &trainable, step)?;
            total += value;
        }
        let loss = total / batches.len() as f64;
        info!("stage 2 epoch {}/{}: lr {lr:e}, L_au {loss:.6}", epoch + 1, config.stage2_epochs);
        history.push(EpochLog { epoch, lr, loss });
        let ck = Checkpoint {
            config: config.clone(),
            stage: 2,
            epoch: (epoch + 1) as u32,
            rng: rng.state(),
            params: store.clone(),
            velocity: velocity_named(&store, &sgd),
            adjacency: Some(g.clone()),
        };
        on_epoch(&ck)?;
        checkpoint = Some(ck);
    }
    Ok(TrainOutcome {
        checkpoint: checkpoint.expect("at least one epoch"),
        history,
    })
}

/// Rebuilds the stage-2 network described by a checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(AuGcn, Tensor)> {
    let g = ck
        .adjacency
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no graph; run stage 2 first".into()))?;
    let r = g.rows();
    let encoders = Autoencoders::bind(&ck.params, r)?;
    let gcn = GcnClassifier::bind(&ck.params, r, ck.config.dropout)?;
    Ok((AuGcn { encoders, gcn }, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::prepare;
    use crate::graph::{assemble_graph, BoolRelationMatrix};
    use crate::roi::{build_layout, DatasetConfig, RuleTable};
    use crate::synth::{generate_synthetic, SynthSpec};

    fn setup(samples: usize, seed: u64) -> (RoiLayout, PreparedSet, TrainConfig) {
        let mut config = TrainConfig::desk();
        config.n = 8;
        config.hidden = 32;
        config.seed = seed;
        config.stage1_epochs = 3;
        config.stage2_epochs = 3;
        let layout = build_layout(&DatasetConfig::toy(), &RuleTable::default_ibug68(), config.n).unwrap();
        let rel = BoolRelationMatrix::identity(&layout.au_ids);
        let spec = SynthSpec { samples, ..SynthSpec::default() };
        let man = generate_synthetic(&layout, &rel, &spec, &mut SeededRng::new(seed)).unwrap();
        let data = prepare(&man, &layout, None).unwrap();
        (layout, data, config)
    }

    fn value_of<'a>(ck: &'a Checkpoint, name: &str) -> &'a Tensor {
        &ck.params.by_name(name).unwrap().value
    }

    #[test]
    fn stages_run_and_are_deterministic() {
        let (layout, data, config) = setup(24, 1);
        let mut epochs = 0;
        let s1 = train_stage1(&data, &layout, &config, |_| {
            epochs += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(epochs, 3);
        assert_eq!(s1.checkpoint.epoch, 3);
        let again = train_stage1(&data, &layout, &config, |_| Ok(())).unwrap();
        assert_eq!(again.checkpoint.to_bytes(), s1.checkpoint.to_bytes());

        let rel = BoolRelationMatrix::identity(&layout.au_ids);
        let adj = assemble_graph(&rel, &layout).unwrap();
        let s2 = train_stage2(&s1.checkpoint, &data, &adj, &config, |_| Ok(())).unwrap();
        let s2b = train_stage2(&s1.checkpoint, &data, &adj, &config, |_| Ok(())).unwrap();
        assert_eq!(s2.checkpoint.to_bytes(), s2b.checkpoint.to_bytes());
        assert!(s2.history.iter().all(|h| h.loss.is_finite()));

        // decoders and ROI heads are frozen in stage 2
        for name in ["roi00.dec1.w", "roi03.head.b", "roi05.dec2.b"] {
            assert_eq!(value_of(&s2.checkpoint, name), value_of(&s1.checkpoint, name));
        }
        assert_ne!(value_of(&s2.checkpoint, "roi00.enc1.w"), value_of(&s1.checkpoint, "roi00.enc1.w"));
        let (model, g) = model_from_checkpoint(&s2.checkpoint).unwrap();
        assert_eq!(model.num_rois(), layout.num_rois());
        assert_eq!(g.rows(), layout.num_rois());
    }

    #[test]
    fn mismatched_graph_is_rejected() {
        let (layout, data, config) = setup(12, 2);
        let s1 = train_stage1(&data, &layout, &config, |_| Ok(())).unwrap();
        let too_big = AdjacencyMatrix::identity(layout.num_rois() + 1);
        assert!(train_stage2(&s1.checkpoint, &data, &too_big, &config, |_| Ok(())).is_err());
        let mut other = config.clone();
        other.d0 += 1;
        let adj = AdjacencyMatrix::identity(layout.num_rois());
        assert!(train_stage2(&s1.checkpoint, &data, &adj, &other, |_| Ok(())).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let (layout, data, mut config) = setup(12, 3);
        config.lr = 1e200;
        config.stage1_epochs = 5;
        let err = train_stage1(&data, &layout, &config, |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Diverged { stage: 1, .. }), "{err}");
    }

    #[test]
    fn single_sample_reconstruction_overfits() {
        let (layout, data, mut config) = setup(1, 4);
        config.stage1_epochs = 1000;
        config.lr_period = 1000;
        config.batch_size = 1;
        let s1 = train_stage1(&data, &layout, &config, |_| Ok(())).unwrap();
        let encoders = Autoencoders::bind(&s1.checkpoint.params, layout.num_rois()).unwrap();
        let batch = batch_of(&data, &[0], layout.num_rois()).unwrap();
        let labels: Vec<Tensor> = (0..layout.num_rois())
            .map(|roi| Tensor::from_rows(&[roi_label_matrix(&data.examples[0].labels, &layout).unwrap().row(roi).to_vec()]).unwrap())
            .collect();
        let mut tape = Tape::new();
        let (_, recon, _) = encoders
            .stage1_loss(&mut tape, &s1.checkpoint.params, &batch.patches, &labels, config.lambda1)
            .unwrap();
        let l_r = tape.value(recon).value();
        assert!(l_r < 0.01, "L_R = {l_r}");
    }
}
