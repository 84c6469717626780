//! Synthetic faces with planted AU relations.
//!
//! Labels come from a latent-factor model: each connected component of the
//! relation matrix shares one Bernoulli factor and every AU copies its
//! component's factor, flipped with probability `label_noise`. Images are
//! 200×200 grayscale: a flat background, one Gaussian blob per active AU at
//! its ROI center on the canonical landmark template, and pixel noise.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, ImageSource, LandmarkSource, SampleRecord};
use crate::error::{Error, Result};
use crate::graph::BoolRelationMatrix;
use crate::rng::SeededRng;
use crate::roi::{LandmarkSet, RoiKind, RoiLayout};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 200;
pub const BACKGROUND: f64 = 0.3;
/// Horizontal spacing of blobs for AUs sharing one ROI.
pub const BLOB_SPACING: f64 = 4.0;

/// Everything needed to re-render one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthImage {
    pub seed: u64,
    pub pixel_noise: f64,
    pub amplitude: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub samples: usize,
    /// Probability that a component factor is on.
    pub base_rate: f64,
    /// Per-AU flip probability.
    pub label_noise: f64,
    /// Standard deviation of additive pixel noise.
    pub pixel_noise: f64,
    pub amplitude: f64,
    pub sigma: f64,
    pub subjects: usize,
    pub videos_per_subject: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            samples: 2000,
            base_rate: 0.5,
            label_noise: 0.1,
            pixel_noise: 0.1,
            amplitude: 0.5,
            sigma: 3.0,
            subjects: 9,
            videos_per_subject: 2,
        }
    }
}

/// Connected-component id per AU (ids follow first appearance).
pub fn components(m: &BoolRelationMatrix) -> Vec<usize> {
    let c = m.au_ids.len();
    let mut comp = vec![usize::MAX; c];
    let mut next = 0;
    for start in 0..c {
        if comp[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        comp[start] = next;
        while let Some(i) = stack.pop() {
            for j in 0..c {
                if comp[j] == usize::MAX && (m.get(i, j) || m.get(j, i)) {
                    comp[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    comp
}

fn check_relations(m: &BoolRelationMatrix) -> Result<()> {
    if !m.is_symmetric() || !m.has_unit_diagonal() {
        return Err(Error::Config("planted relation matrix must be symmetric with a unit diagonal".into()));
    }
    Ok(())
}

/// `n` label vectors from the latent-factor model.
pub fn sample_labels(m: &BoolRelationMatrix, n: usize, base_rate: f64, label_noise: f64, rng: &mut SeededRng) -> Result<Vec<Vec<u8>>> {
    check_relations(m)?;
    for (name, p) in [("base_rate", base_rate), ("label_noise", label_noise)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("{name} = {p} must lie in [0, 1]")));
        }
    }
    let comp = components(m);
    let k = comp.iter().max().map_or(0, |&v| v + 1);
    let mut factors = vec![false; k];
    Ok((0..n)
        .map(|_| {
            for f in factors.iter_mut() {
                *f = rng.bernoulli(base_rate);
            }
            comp.iter()
                .map(|&g| (factors[g] ^ rng.bernoulli(label_noise)) as u8)
                .collect()
        })
        .collect())
}

/// Midpoint between the expected symmetrized co-occurrence of a linked pair
/// and of an unlinked pair under [`sample_labels`].
pub fn planted_threshold(base_rate: f64, label_noise: f64) -> f64 {
    let (p, q) = (base_rate, label_noise);
    let marginal = p * (1.0 - q) + (1.0 - p) * q;
    let both_linked = p * (1.0 - q).powi(2) + (1.0 - p) * q * q;
    let linked = 2.0 * both_linked / marginal;
    let unlinked = 2.0 * marginal;
    (linked + unlinked) / 2.0
}

/// Blob centers for the active AUs of `labels` on the canonical face.
pub fn blob_centers(labels: &[u8], layout: &RoiLayout) -> Vec<(f64, f64)> {
    let landmarks = LandmarkSet::canonical_ibug68();
    let mut out = Vec::new();
    for roi in &layout.rois {
        let (RoiKind::Local, Some(rule)) = (roi.kind, roi.rule.as_ref()) else {
            continue;
        };
        let (cx, cy) = rule.center(&landmarks);
        let m = roi.au_ids.len() as f64;
        for (k, au) in roi.au_ids.iter().enumerate() {
            let Some(a) = layout.au_index(*au) else { continue };
            if labels[a] != 0 {
                out.push((cx + (k as f64 - (m - 1.0) / 2.0) * BLOB_SPACING, cy));
            }
        }
    }
    out
}

/// Renders one frame as a `200×200×1` tensor in `[0, 1]`.
pub fn render_image(spec: &SynthImage, labels: &[u8], layout: &RoiLayout) -> Result<Tensor> {
    if labels.len() != layout.num_aus() {
        return Err(Error::Shape {
            op: "render_image",
            lhs: vec![labels.len()],
            rhs: vec![layout.num_aus()],
        });
    }
    let s = IMAGE_SIZE;
    let mut rng = SeededRng::new(spec.seed);
    let mut img: Vec<f64> = (0..s * s).map(|_| BACKGROUND + spec.pixel_noise * rng.normal()).collect();
    let reach = (4.0 * spec.sigma).ceil() as i64;
    let two_var = 2.0 * spec.sigma * spec.sigma;
    for (cx, cy) in blob_centers(labels, layout) {
        let (x0, y0) = (cx.round() as i64, cy.round() as i64);
        for y in (y0 - reach).max(0)..=(y0 + reach).min(s as i64 - 1) {
            for x in (x0 - reach).max(0)..=(x0 + reach).min(s as i64 - 1) {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                img[y as usize * s + x as usize] += spec.amplitude * (-d2 / two_var).exp();
            }
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![s, s, 1], img)
}

/// A synthetic manifest whose images render on demand. `relations` is
/// reordered to the layout's AU order.
pub fn generate_synthetic(layout: &RoiLayout, relations: &BoolRelationMatrix, spec: &SynthSpec, rng: &mut SeededRng) -> Result<DatasetManifest> {
    let m = relations.reorder(&layout.au_ids)?;
    if spec.subjects == 0 || spec.videos_per_subject == 0 {
        return Err(Error::Config("synthetic data needs at least one subject and video".into()));
    }
    let labels = sample_labels(&m, spec.samples, spec.base_rate, spec.label_noise, rng)?;
    let landmarks = LandmarkSet::canonical_ibug68();
    let videos = spec.subjects * spec.videos_per_subject;
    let records = labels
        .into_iter()
        .enumerate()
        .map(|(i, y)| {
            let v = i * videos / spec.samples.max(1);
            SampleRecord {
                subject_id: format!("S{:03}", v / spec.videos_per_subject),
                video_id: format!("T{}", v % spec.videos_per_subject),
                frame_id: format!("{i:06}"),
                image: ImageSource::Synthetic(SynthImage {
                    seed: rng.next_u64(),
                    pixel_noise: spec.pixel_noise,
                    amplitude: spec.amplitude,
                    sigma: spec.sigma,
                }),
                landmarks: LandmarkSource::Inline(landmarks.clone()),
                labels: y,
            }
        })
        .collect();
    Ok(DatasetManifest {
        name: format!("synthetic-{}", layout.name),
        au_ids: layout.au_ids.clone(),
        records,
    })
}
