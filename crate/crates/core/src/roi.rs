//! Facial regions of interest.
//!
//! AU centers are computed from facial landmarks with a data-driven rule
//! table ([`RuleTable`]). A [`RoiLayout`] lists the local ROIs of a dataset
//! configuration (one per AU group and side) followed by a single global ROI
//! that covers the whole face. Local patches are fixed-size crops; the global
//! patch is a bilinear resample of the full image.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_RULES_TOML: &str = include_str!("../fixtures/au_rules_ibug68.toml");

pub const IBUG68: &str = "ibug68";

/// Number of landmarks a scheme declares.
pub fn scheme_size(scheme: &str) -> Option<usize> {
    match scheme {
        IBUG68 => Some(68),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Laterality {
    Left,
    Right,
    Up,
    Down,
    None,
}

impl Laterality {
    pub fn mirrored(self) -> Self {
        match self {
            Laterality::Left => Laterality::Right,
            Laterality::Right => Laterality::Left,
            other => other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Laterality::Left => "left",
            Laterality::Right => "right",
            Laterality::Up => "up",
            Laterality::Down => "down",
            Laterality::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    scheme: String,
    points: Vec<(f64, f64)>,
    width: usize,
    height: usize,
}

impl LandmarkSet {
    pub fn new(scheme: &str, points: Vec<(f64, f64)>, width: usize, height: usize) -> Result<Self> {
        if let Some(k) = scheme_size(scheme) {
            if k != points.len() {
                return Err(Error::Config(format!(
                    "landmark scheme {scheme} expects {k} points, got {}",
                    points.len()
                )));
            }
        }
        for (i, &(x, y)) in points.iter().enumerate() {
            if !(x >= 0.0 && x < width as f64 && y >= 0.0 && y < height as f64) {
                return Err(Error::Config(format!(
                    "landmark {i} at ({x}, {y}) lies outside the {width}x{height} image"
                )));
            }
        }
        Ok(Self {
            scheme: scheme.to_string(),
            points,
            width,
            height,
        })
    }

    /// Reads `x,y` rows (no header).
    pub fn load_csv(path: &Path, scheme: &str, width: usize, height: usize) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut points = Vec::new();
        for (line, row) in reader.records().enumerate() {
            let row = row?;
            let parse = |i: usize| -> Result<f64> {
                row.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| {
                    Error::Config(format!("{}: line {}: expected `x,y`", path.display(), line + 1))
                })
            };
            points.push((parse(0)?, parse(1)?));
        }
        Self::new(scheme, points, width, height)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (x, y) in &self.points {
            out.push_str(&format!("{x},{y}\n"));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn scheme(&self) -> &str {
        &self.scheme
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Horizontal mirror `x → W − 1 − x` with iBUG-68 index relabelling, so
    /// that the result is again a valid landmark set of the same scheme.
    pub fn mirrored(&self) -> Result<Self> {
        let w = self.width as f64;
        let flip = if self.scheme == IBUG68 {
            IBUG68_FLIP.to_vec()
        } else {
            (0..self.points.len()).collect()
        };
        let points = flip
            .iter()
            .map(|&j| {
                let (x, y) = self.points[j];
                (w - 1.0 - x, y)
            })
            .collect();
        Self::new(&self.scheme, points, self.width, self.height)
    }

    /// Canonical frontal 68-point face on a 200×200 image, symmetric about
    /// the vertical line x = 99.5.
    pub fn canonical_ibug68() -> Self {
        let mut pts = vec![(0.0, 0.0); 68];
        for (i, p) in pts.iter_mut().enumerate().take(17) {
            let theta = std::f64::consts::PI * (1.0 - i as f64 / 16.0);
            *p = (99.5 + 70.0 * theta.cos(), 80.0 + 105.0 * theta.sin());
        }
        let brow = [(45.0, 58.0), (55.0, 52.0), (66.0, 50.0), (77.0, 51.0), (88.0, 55.0)];
        let nose = [(99.5, 65.0), (99.5, 78.0), (99.5, 91.0), (99.5, 104.0)];
        let nostril = [(84.0, 118.0), (91.0, 121.0), (99.5, 123.0)];
        let eye = [(55.0, 75.0), (63.0, 70.0), (73.0, 70.0), (81.0, 76.0), (73.0, 79.0), (63.0, 79.0)];
        let outer = [
            (72.0, 148.0),
            (81.0, 141.0),
            (91.0, 137.0),
            (99.5, 139.0),
            (99.5, 162.0),
            (91.0, 161.0),
            (81.0, 157.0),
        ];
        let inner = [(77.0, 148.0), (91.0, 144.0), (99.5, 145.0), (99.5, 154.0), (91.0, 153.0)];

        for (k, &p) in brow.iter().enumerate() {
            pts[17 + k] = p;
        }
        for (k, &p) in nose.iter().enumerate() {
            pts[27 + k] = p;
        }
        for (k, &p) in nostril.iter().enumerate() {
            pts[31 + k] = p;
        }
        for (k, &p) in eye.iter().enumerate() {
            pts[36 + k] = p;
        }
        for (idx, &p) in [48, 49, 50, 51, 57, 58, 59].iter().zip(&outer) {
            pts[*idx] = p;
        }
        for (idx, &p) in [60, 61, 62, 66, 67].iter().zip(&inner) {
            pts[*idx] = p;
        }
        // Fill the other side by mirroring.
        for i in 0..68 {
            let j = IBUG68_FLIP[i];
            if (17..68).contains(&i) && pts[i] != (0.0, 0.0) && pts[j] == (0.0, 0.0) {
                pts[j] = (199.0 - pts[i].0, pts[i].1);
            }
        }
        Self::new(IBUG68, pts, 200, 200).expect("canonical template is valid")
    }
}

/// iBUG-68 left/right index permutation.
pub const IBUG68_FLIP: [usize; 68] = [
    16, 15, 14, 13, 12, 11, 10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0, // jaw
    26, 25, 24, 23, 22, 21, 20, 19, 18, 17, // brows
    27, 28, 29, 30, // nose bridge
    35, 34, 33, 32, 31, // nostrils
    45, 44, 43, 42, 47, 46, // right eye ↔ left eye
    39, 38, 37, 36, 41, 40, //
    54, 53, 52, 51, 50, 49, 48, 59, 58, 57, 56, 55, // outer lip
    64, 63, 62, 61, 60, 67, 66, 65, // inner lip
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuCenterRule {
    pub au: u32,
    pub laterality: Laterality,
    /// `(landmark index, weight)`; one or two entries with weights summing to 1.
    pub points: Vec<(usize, f64)>,
    #[serde(default)]
    pub offset: (f64, f64),
}

impl AuCenterRule {
    pub fn single(au: u32, laterality: Laterality, index: usize, offset: (f64, f64)) -> Self {
        Self {
            au,
            laterality,
            points: vec![(index, 1.0)],
            offset,
        }
    }

    fn validate(&self, landmark_count: Option<usize>) -> Result<()> {
        if self.points.is_empty() || self.points.len() > 2 {
            return Err(Error::Config(format!(
                "rule for AU{} ({}) must reference one or two landmarks",
                self.au,
                self.laterality.as_str()
            )));
        }
        let weight: f64 = self.points.iter().map(|p| p.1).sum();
        if (weight - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "rule for AU{} ({}) has weights summing to {weight}, expected 1",
                self.au,
                self.laterality.as_str()
            )));
        }
        if let Some(k) = landmark_count {
            if let Some(&(idx, _)) = self.points.iter().find(|p| p.0 >= k) {
                return Err(Error::Config(format!(
                    "rule for AU{} references landmark {idx}, scheme has {k}",
                    self.au
                )));
            }
        }
        Ok(())
    }

    pub fn center(&self, landmarks: &LandmarkSet) -> (f64, f64) {
        let (mut x, mut y) = self.offset;
        for &(idx, w) in &self.points {
            let (px, py) = landmarks.points[idx];
            x += w * px;
            y += w * py;
        }
        let (width, height) = landmarks.size();
        (x.clamp(0.0, width as f64 - 1.0), y.clamp(0.0, height as f64 - 1.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleTable {
    pub scheme: String,
    #[serde(rename = "rule")]
    pub rules: Vec<AuCenterRule>,
}

impl RuleTable {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: RuleTable = toml::from_str(text)?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn default_ibug68() -> Self {
        Self::from_toml(DEFAULT_RULES_TOML).expect("shipped rule table is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let k = scheme_size(&self.scheme);
        for rule in &self.rules {
            rule.validate(k)?;
        }
        Ok(())
    }

    pub fn find(&self, au: u32, laterality: Laterality) -> Option<&AuCenterRule> {
        self.rules.iter().find(|r| r.au == au && r.laterality == laterality)
    }

    pub fn covers(&self, au: u32) -> bool {
        self.rules.iter().any(|r| r.au == au)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuCenter {
    pub au: u32,
    pub laterality: Laterality,
    pub center: (f64, f64),
}

/// One center per rule, clamped into the image.
pub fn compute_au_centers(landmarks: &LandmarkSet, rules: &[AuCenterRule]) -> Result<Vec<AuCenter>> {
    if rules.is_empty() {
        return Err(Error::Config("empty AU center rule list".into()));
    }
    rules
        .iter()
        .map(|rule| {
            rule.validate(Some(landmarks.points.len()))?;
            Ok(AuCenter {
                au: rule.au,
                laterality: rule.laterality,
                center: rule.center(landmarks),
            })
        })
        .collect()
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[h, w, c] => Ok((h, w, c)),
        other => Err(Error::Size(format!("expected an H×W×ch image, got shape {other:?}"))),
    }
}

/// Top-left corner of the `n`-wide window around `center`, shifted inward so
/// the window lies inside `[0, extent)`.
fn window_start(center: f64, n: usize, extent: usize) -> usize {
    let start = center.floor() as i64 - (n / 2) as i64;
    start.clamp(0, (extent - n) as i64) as usize
}

/// Crops the `n×n` window around `center = (x, y)`.
pub fn extract_roi(image: &Tensor, center: (f64, f64), n: usize) -> Result<Tensor> {
    let (h, w, ch) = image_dims(image)?;
    if n == 0 || n > h || n > w {
        return Err(Error::Size(format!("ROI side {n} does not fit a {h}x{w} image")));
    }
    let x0 = window_start(center.0, n, w);
    let y0 = window_start(center.1, n, h);
    let src = image.data();
    let mut out = Vec::with_capacity(n * n * ch);
    for y in y0..y0 + n {
        let begin = (y * w + x0) * ch;
        out.extend_from_slice(&src[begin..begin + n * ch]);
    }
    Tensor::new(vec![n, n, ch], out)
}

/// Bilinear resample of the whole image to `n×n` (corner-aligned grid).
pub fn extract_global(image: &Tensor, n: usize) -> Result<Tensor> {
    let (h, w, ch) = image_dims(image)?;
    if h < 2 || w < 2 || n == 0 {
        return Err(Error::Size(format!("cannot resample a {h}x{w} image to {n}x{n}")));
    }
    let coord = |i: usize, extent: usize| -> f64 {
        if n == 1 {
            (extent - 1) as f64 / 2.0
        } else {
            i as f64 * (extent - 1) as f64 / (n - 1) as f64
        }
    };
    let src = image.data();
    let mut out = Vec::with_capacity(n * n * ch);
    for i in 0..n {
        let sy = coord(i, h);
        let y0 = (sy.floor() as usize).min(h - 2);
        let fy = sy - y0 as f64;
        for j in 0..n {
            let sx = coord(j, w);
            let x0 = (sx.floor() as usize).min(w - 2);
            let fx = sx - x0 as f64;
            for c in 0..ch {
                let at = |y: usize, x: usize| src[(y * w + x) * ch + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
                let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![n, n, ch], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiKind {
    Local,
    Global,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiSpec {
    pub roi_id: usize,
    pub kind: RoiKind,
    /// Center rule for local ROIs; resolved per image via [`RoiLayout::centers`].
    pub rule: Option<AuCenterRule>,
    pub size: usize,
    pub au_ids: Vec<u32>,
    pub laterality: Laterality,
}

impl RoiSpec {
    pub fn name(&self) -> String {
        match self.kind {
            RoiKind::Global => "global".to_string(),
            RoiKind::Local => {
                let aus: Vec<String> = self.au_ids.iter().map(|a| format!("AU{a}")).collect();
                format!("{}_{}", aus.join("+"), self.laterality.as_str())
            }
        }
    }
}

/// A group of AUs sharing one ROI, instantiated once per listed side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiGroup {
    pub au_ids: Vec<u32>,
    pub lateralities: Vec<Laterality>,
}

impl RoiGroup {
    fn new(au_ids: &[u32], lateralities: &[Laterality]) -> Self {
        Self {
            au_ids: au_ids.to_vec(),
            lateralities: lateralities.to_vec(),
        }
    }
}

/// Label set and ROI grouping of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    pub au_ids: Vec<u32>,
    pub groups: Vec<RoiGroup>,
}

const LR: [Laterality; 2] = [Laterality::Left, Laterality::Right];
const UD: [Laterality; 2] = [Laterality::Up, Laterality::Down];

impl DatasetConfig {
    /// 12 AUs, 18 local ROIs + global = 19.
    pub fn bp4d() -> Self {
        Self {
            name: "bp4d".into(),
            au_ids: vec![1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24],
            groups: vec![
                RoiGroup::new(&[1], &LR),
                RoiGroup::new(&[2], &LR),
                RoiGroup::new(&[4], &LR),
                RoiGroup::new(&[6], &LR),
                RoiGroup::new(&[7], &LR),
                RoiGroup::new(&[10], &LR),
                RoiGroup::new(&[12, 14, 15], &LR),
                RoiGroup::new(&[17], &LR),
                RoiGroup::new(&[23, 24], &UD),
            ],
        }
    }

    /// 8 AUs, 13 local ROIs + global = 14.
    pub fn disfa() -> Self {
        Self {
            name: "disfa".into(),
            au_ids: vec![1, 2, 4, 6, 9, 12, 25, 26],
            groups: vec![
                RoiGroup::new(&[1], &LR),
                RoiGroup::new(&[2], &LR),
                RoiGroup::new(&[4], &LR),
                RoiGroup::new(&[6], &LR),
                RoiGroup::new(&[9], &[Laterality::None]),
                RoiGroup::new(&[12], &LR),
                RoiGroup::new(&[25, 26], &UD),
            ],
        }
    }

    /// Desk-scale layout: 4 AUs, 5 local ROIs + global = 6.
    pub fn toy() -> Self {
        Self {
            name: "toy".into(),
            au_ids: vec![1, 2, 6, 12],
            groups: vec![
                RoiGroup::new(&[1], &LR),
                RoiGroup::new(&[2], &[Laterality::Left]),
                RoiGroup::new(&[6], &[Laterality::Left]),
                RoiGroup::new(&[12], &[Laterality::Left]),
            ],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "bp4d" => Ok(Self::bp4d()),
            "disfa" => Ok(Self::disfa()),
            "toy" | "synthetic" => Ok(Self::toy()),
            other => Err(Error::Config(format!("unknown dataset config `{other}`"))),
        }
    }

    pub fn num_aus(&self) -> usize {
        self.au_ids.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiLayout {
    pub name: String,
    /// AU ids in label-column order.
    pub au_ids: Vec<u32>,
    pub rois: Vec<RoiSpec>,
    /// `incidence[a][r]`: AU `au_ids[a]` belongs to ROI `r`.
    pub incidence: Vec<Vec<bool>>,
    pub symmetric_pairs: Vec<(usize, usize)>,
}

/// Builds the local ROIs of `config` from `rules`, appends the global ROI and
/// derives the AU→ROI incidence and mirror pairs.
pub fn build_layout(config: &DatasetConfig, rules: &RuleTable, n: usize) -> Result<RoiLayout> {
    if n == 0 {
        return Err(Error::Config("ROI size must be positive".into()));
    }
    let missing: Vec<String> = config
        .au_ids
        .iter()
        .filter(|&&au| !rules.covers(au))
        .map(|au| format!("AU{au}"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "no center rule for {}",
            missing.join(", ")
        )));
    }

    let mut rois = Vec::new();
    let mut symmetric_pairs = Vec::new();
    for group in &config.groups {
        if let Some(au) = group.au_ids.iter().find(|au| !config.au_ids.contains(au)) {
            return Err(Error::Config(format!("ROI group references AU{au} outside the label set")));
        }
        let first_id = rois.len();
        for &lat in &group.lateralities {
            let rule = group
                .au_ids
                .iter()
                .find_map(|&au| rules.find(au, lat))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "no {} center rule for AU{}",
                        lat.as_str(),
                        group.au_ids[0]
                    ))
                })?;
            rois.push(RoiSpec {
                roi_id: rois.len(),
                kind: RoiKind::Local,
                rule: Some(rule.clone()),
                size: n,
                au_ids: group.au_ids.clone(),
                laterality: lat,
            });
        }
        if group.lateralities.len() == 2 {
            symmetric_pairs.push((first_id, first_id + 1));
        }
    }
    rois.push(RoiSpec {
        roi_id: rois.len(),
        kind: RoiKind::Global,
        rule: None,
        size: n,
        au_ids: Vec::new(),
        laterality: Laterality::None,
    });

    let incidence: Vec<Vec<bool>> = config
        .au_ids
        .iter()
        .map(|au| rois.iter().map(|r| r.au_ids.contains(au)).collect())
        .collect();
    if let Some(a) = incidence.iter().position(|row| !row.iter().any(|&b| b)) {
        return Err(Error::Config(format!(
            "AU{} is not assigned to any ROI",
            config.au_ids[a]
        )));
    }
    let layout = RoiLayout {
        name: config.name.clone(),
        au_ids: config.au_ids.clone(),
        rois,
        incidence,
        symmetric_pairs,
    };
    layout.validate()?;
    Ok(layout)
}

impl RoiLayout {
    pub fn num_rois(&self) -> usize {
        self.rois.len()
    }

    pub fn num_aus(&self) -> usize {
        self.au_ids.len()
    }

    pub fn roi_size(&self) -> usize {
        self.rois[0].size
    }

    /// Index of the global ROI, if present (always the last ROI).
    pub fn global_index(&self) -> Option<usize> {
        self.rois
            .last()
            .filter(|r| r.kind == RoiKind::Global)
            .map(|r| r.roi_id)
    }

    pub fn au_index(&self, au: u32) -> Option<usize> {
        self.au_ids.iter().position(|&a| a == au)
    }

    pub fn belongs(&self, au_index: usize, roi: usize) -> bool {
        self.incidence[au_index][roi]
    }

    /// Structural checks: local ROIs carry AUs, at most one global ROI placed
    /// last, mirror pairs disjoint.
    pub fn validate(&self) -> Result<()> {
        let globals = self.rois.iter().filter(|r| r.kind == RoiKind::Global).count();
        if globals > 1 || (globals == 1 && self.global_index().is_none()) {
            return Err(Error::Config("the global ROI must be unique and last".into()));
        }
        for roi in &self.rois {
            if roi.kind == RoiKind::Local && roi.au_ids.is_empty() {
                return Err(Error::Config(format!("local ROI {} carries no AU", roi.roi_id)));
            }
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in &self.symmetric_pairs {
            if a == b || !seen.insert(a) || !seen.insert(b) || a >= self.rois.len() || b >= self.rois.len() {
                return Err(Error::Config(format!("invalid mirror pair ({a}, {b})")));
            }
        }
        Ok(())
    }

    /// The same layout with the global ROI removed.
    pub fn without_global(&self) -> RoiLayout {
        let mut out = self.clone();
        if let Some(g) = self.global_index() {
            out.rois.truncate(g);
            for row in &mut out.incidence {
                row.truncate(g);
            }
        }
        out
    }

    /// Per-ROI centers for one face; `None` for the global ROI.
    pub fn centers(&self, landmarks: &LandmarkSet) -> Vec<Option<(f64, f64)>> {
        self.rois
            .iter()
            .map(|r| r.rule.as_ref().map(|rule| rule.center(landmarks)))
            .collect()
    }

    /// One `n×n×ch` patch per ROI, in ROI order.
    pub fn extract_patches(&self, image: &Tensor, landmarks: &LandmarkSet) -> Result<Vec<Tensor>> {
        let n = self.roi_size();
        self.centers(landmarks)
            .into_iter()
            .map(|c| match c {
                Some(center) => extract_roi(image, center, n),
                None => extract_global(image, n),
            })
            .collect()
    }

    /// Mirror partner of each ROI, if any.
    pub fn mirror_of(&self) -> HashMap<usize, usize> {
        let mut map = HashMap::new();
        for &(a, b) in &self.symmetric_pairs {
            map.insert(a, b);
            map.insert(b, a);
        }
        map
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(h: usize, w: usize) -> Tensor {
        let data = (0..h * w).map(|i| i as f64).collect();
        Tensor::new(vec![h, w, 1], data).unwrap()
    }

    fn blank_landmarks(points: Vec<(f64, f64)>) -> LandmarkSet {
        LandmarkSet::new("custom", points, 200, 200).unwrap()
    }

    #[test]
    fn single_landmark_rule() {
        let mut pts = vec![(0.0, 0.0); 31];
        pts[30] = (100.0, 120.0);
        let lm = blank_landmarks(pts);
        let rule = AuCenterRule::single(9, Laterality::None, 30, (0.0, 0.0));
        let c = compute_au_centers(&lm, &[rule]).unwrap();
        assert_eq!(c[0].center, (100.0, 120.0));
    }

    #[test]
    fn midpoint_and_offset_rules() {
        let lm = blank_landmarks(vec![(80.0, 100.0), (120.0, 100.0), (100.0, 100.0)]);
        let mid = AuCenterRule {
            au: 1,
            laterality: Laterality::None,
            points: vec![(0, 0.5), (1, 0.5)],
            offset: (0.0, 0.0),
        };
        let off = AuCenterRule::single(2, Laterality::None, 2, (0.0, -16.0));
        let c = compute_au_centers(&lm, &[mid, off]).unwrap();
        assert_eq!(c[0].center, (100.0, 100.0));
        assert_eq!(c[1].center, (100.0, 84.0));
    }

    #[test]
    fn centers_are_clamped() {
        let lm = blank_landmarks(vec![(2.0, 3.0)]);
        let rule = AuCenterRule::single(1, Laterality::None, 0, (-10.0, 500.0));
        let c = compute_au_centers(&lm, &[rule]).unwrap();
        assert_eq!(c[0].center, (0.0, 199.0));
    }

    #[test]
    fn empty_rules_rejected() {
        let lm = blank_landmarks(vec![(1.0, 1.0)]);
        assert!(matches!(compute_au_centers(&lm, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn out_of_range_landmark_index_rejected() {
        let lm = blank_landmarks(vec![(1.0, 1.0)]);
        let rule = AuCenterRule::single(1, Laterality::None, 5, (0.0, 0.0));
        assert!(compute_au_centers(&lm, &[rule]).is_err());
    }

    #[test]
    fn landmark_set_validation() {
        assert!(LandmarkSet::new(IBUG68, vec![(1.0, 1.0); 67], 200, 200).is_err());
        assert!(LandmarkSet::new("custom", vec![(200.0, 1.0)], 200, 200).is_err());
    }

    #[test]
    fn roi_window_hand_arithmetic() {
        let img = gradient_image(200, 200);
        let patch = extract_roi(&img, (100.0, 100.0), 25).unwrap();
        assert_eq!(patch.shape(), &[25, 25, 1]);
        // first pixel is (row 88, col 88), last (112, 112)
        assert_eq!(patch.data()[0], (88 * 200 + 88) as f64);
        assert_eq!(*patch.data().last().unwrap(), (112 * 200 + 112) as f64);
    }

    #[test]
    fn roi_window_shifts_inward() {
        let img = gradient_image(200, 200);
        let patch = extract_roi(&img, (0.0, 0.0), 25).unwrap();
        assert_eq!(patch.data()[0], 0.0);
        assert_eq!(*patch.data().last().unwrap(), (24 * 200 + 24) as f64);
        let far = extract_roi(&img, (199.0, 199.0), 25).unwrap();
        assert_eq!(*far.data().last().unwrap(), (199 * 200 + 199) as f64);
    }

    #[test]
    fn roi_window_full_image() {
        let img = gradient_image(30, 30);
        assert_eq!(extract_roi(&img, (3.0, 27.0), 30).unwrap(), img);
        assert!(matches!(extract_roi(&img, (3.0, 3.0), 31), Err(Error::Size(_))));
    }

    #[test]
    fn global_resample_cases() {
        let constant = Tensor::full(&[40, 30, 3], 0.7);
        let g = extract_global(&constant, 9).unwrap();
        assert!(g.data().iter().all(|v| (v - 0.7).abs() < 1e-15));

        let img = gradient_image(12, 12);
        let same = extract_global(&img, 12).unwrap();
        for (a, b) in same.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let checker = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let up = extract_global(&checker, 3).unwrap();
        assert!((up.data()[4] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn default_rules_parse() {
        let table = RuleTable::default_ibug68();
        assert_eq!(table.scheme, IBUG68);
        assert!(table.find(1, Laterality::Left).is_some());
    }

    #[test]
    fn full_layout_sizes() {
        let rules = RuleTable::default_ibug68();
        let bp4d = build_layout(&DatasetConfig::bp4d(), &rules, 25).unwrap();
        assert_eq!(bp4d.num_rois(), 19);
        assert_eq!(bp4d.global_index(), Some(18));
        let disfa = build_layout(&DatasetConfig::disfa(), &rules, 25).unwrap();
        assert_eq!(disfa.num_rois(), 14);
        let toy = build_layout(&DatasetConfig::toy(), &rules, 8).unwrap();
        assert_eq!(toy.num_rois(), 6);
    }

    #[test]
    fn shared_mouth_corner_roi() {
        let rules = RuleTable::default_ibug68();
        let layout = build_layout(&DatasetConfig::bp4d(), &rules, 25).unwrap();
        let a12 = layout.au_index(12).unwrap();
        let a14 = layout.au_index(14).unwrap();
        for r in 0..layout.num_rois() {
            if layout.belongs(a12, r) {
                assert!(layout.belongs(a14, r));
            }
        }
        assert!((0..layout.num_rois()).any(|r| layout.belongs(a12, r)));
    }

    #[test]
    fn global_roi_carries_no_au() {
        let rules = RuleTable::default_ibug68();
        for cfg in [DatasetConfig::bp4d(), DatasetConfig::disfa(), DatasetConfig::toy()] {
            let layout = build_layout(&cfg, &rules, 25).unwrap();
            let g = layout.global_index().unwrap();
            for a in 0..layout.num_aus() {
                assert!(!layout.belongs(a, g));
                assert!((0..g).any(|r| layout.belongs(a, r)));
            }
        }
    }

    #[test]
    fn missing_rule_lists_au() {
        let mut rules = RuleTable::default_ibug68();
        rules.rules.retain(|r| r.au != 17);
        let err = build_layout(&DatasetConfig::bp4d(), &rules, 25).unwrap_err();
        assert!(err.to_string().contains("AU17"), "{err}");
    }

    #[test]
    fn canonical_template_is_symmetric() {
        let lm = LandmarkSet::canonical_ibug68();
        let m = lm.mirrored().unwrap();
        for (a, b) in lm.points().iter().zip(m.points()) {
            assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
        }
    }

    #[test]
    fn mirrored_landmarks_mirror_lateral_centers() {
        let rules = RuleTable::default_ibug68();
        // An asymmetric face: perturb the template.
        let base = LandmarkSet::canonical_ibug68();
        let pts: Vec<_> = base
            .points()
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| (x + (i % 5) as f64 - 2.0, y + (i % 3) as f64))
            .collect();
        let lm = LandmarkSet::new(IBUG68, pts, 200, 200).unwrap();
        let mirror = lm.mirrored().unwrap();
        for rule in rules.rules.iter().filter(|r| r.laterality == Laterality::Left) {
            let partner = rules.find(rule.au, Laterality::Right).unwrap();
            let (x, y) = rule.center(&lm);
            let (mx, my) = partner.center(&mirror);
            assert!((199.0 - x - mx).abs() < 1e-9 && (y - my).abs() < 1e-9, "AU{}", rule.au);
        }
    }

    #[test]
    fn patches_have_roi_shape() {
        let rules = RuleTable::default_ibug68();
        let layout = build_layout(&DatasetConfig::bp4d(), &rules, 25).unwrap();
        let img = Tensor::full(&[200, 200, 3], 0.25);
        let patches = layout.extract_patches(&img, &LandmarkSet::canonical_ibug68()).unwrap();
        assert_eq!(patches.len(), 19);
        assert!(patches.iter().all(|p| p.shape() == [25, 25, 3]));
    }
}
