//! Manifests, subject-exclusive folds, per-video sampling and prepared
//! (pre-cropped) examples.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::error::{Error, Result};
use crate::image_io::load_image;
use crate::rng::SeededRng;
use crate::roi::{LandmarkSet, RoiLayout, IBUG68};
use crate::synth::{render_image, SynthImage};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    Path(PathBuf),
    Inline(Tensor),
    /// Rendered on demand by the synthetic generator.
    Synthetic(SynthImage),
}

#[derive(Clone, Debug, PartialEq)]
pub enum LandmarkSource {
    Path(PathBuf),
    Inline(LandmarkSet),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub subject_id: String,
    pub video_id: String,
    pub frame_id: String,
    pub image: ImageSource,
    pub landmarks: LandmarkSource,
    pub labels: Vec<u8>,
}

impl SampleRecord {
    pub fn is_positive(&self) -> bool {
        self.labels.iter().any(|&v| v != 0)
    }

    pub fn describe(&self) -> String {
        format!("{}/{}/{}", self.subject_id, self.video_id, self.frame_id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub au_ids: Vec<u32>,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn num_aus(&self) -> usize {
        self.au_ids.len()
    }

    pub fn labels(&self) -> Vec<Vec<u8>> {
        self.records.iter().map(|r| r.labels.clone()).collect()
    }

    pub fn subjects(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.subject_id.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::EmptyManifest);
        }
        let c = self.au_ids.len();
        for r in &self.records {
            if r.labels.len() != c {
                return Err(Error::Manifest {
                    line: 0,
                    msg: format!("frame {} has {} labels, expected {c}", r.describe(), r.labels.len()),
                });
            }
            if r.labels.iter().any(|&v| v > 1) {
                return Err(Error::Manifest {
                    line: 0,
                    msg: format!("frame {} has a label outside {{0, 1}}", r.describe()),
                });
            }
        }
        Ok(())
    }
}

fn parse_au_header(h: &str) -> Option<u32> {
    let t = h.trim();
    let t = t.strip_prefix("AU").or_else(|| t.strip_prefix("au")).unwrap_or(t);
    t.parse().ok()
}

const FIXED_COLUMNS: [&str; 5] = ["subject_id", "video_id", "frame_id", "image_path", "landmarks_path"];

/// Reads a CSV manifest. AU columns may be named `AU12` or `12` and must all
/// belong to `au_ids`; labels are reordered to `au_ids` order. Relative paths
/// resolve against the manifest's directory.
pub fn load_manifest(path: &Path, name: &str, au_ids: &[u32]) -> Result<DatasetManifest> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    for (i, expected) in FIXED_COLUMNS.iter().enumerate() {
        if headers.get(i).map(str::trim) != Some(*expected) {
            return Err(Error::Manifest {
                line: 1,
                msg: format!("column {} must be `{expected}`", i + 1),
            });
        }
    }
    let mut column_of = vec![usize::MAX; au_ids.len()];
    for (k, h) in headers.iter().enumerate().skip(FIXED_COLUMNS.len()) {
        let au = parse_au_header(h).ok_or_else(|| Error::Manifest {
            line: 1,
            msg: format!("bad AU column header `{h}`"),
        })?;
        let slot = au_ids.iter().position(|&a| a == au).ok_or_else(|| Error::Manifest {
            line: 1,
            msg: format!("unknown AU id {au} for dataset `{name}`"),
        })?;
        column_of[slot] = k;
    }
    if let Some(missing) = column_of.iter().position(|&k| k == usize::MAX) {
        return Err(Error::Manifest {
            line: 1,
            msg: format!("missing label column for AU{}", au_ids[missing]),
        });
    }
    let resolve = |p: &str| {
        let p = Path::new(p.trim());
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i + 2;
        if row.len() != headers.len() {
            return Err(Error::Manifest {
                line,
                msg: format!(
                    "frame {} has {} fields, expected {}",
                    row.get(2).unwrap_or("?"),
                    row.len(),
                    headers.len()
                ),
            });
        }
        let mut labels = Vec::with_capacity(au_ids.len());
        for &k in &column_of {
            let v = match row[k].trim() {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::Manifest {
                        line,
                        msg: format!("label `{other}` in column {} is not 0/1", &headers[k]),
                    })
                }
            };
            labels.push(v);
        }
        records.push(SampleRecord {
            subject_id: row[0].trim().to_string(),
            video_id: row[1].trim().to_string(),
            frame_id: row[2].trim().to_string(),
            image: ImageSource::Path(resolve(&row[3])),
            landmarks: LandmarkSource::Path(resolve(&row[4])),
            labels,
        });
    }
    let manifest = DatasetManifest {
        name: name.to_string(),
        au_ids: au_ids.to_vec(),
        records,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Writes a manifest whose records all reference files.
pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(manifest.au_ids.iter().map(|a| format!("AU{a}")));
    w.write_record(&header)?;
    for r in &manifest.records {
        let (ImageSource::Path(img), LandmarkSource::Path(lm)) = (&r.image, &r.landmarks) else {
            return Err(Error::Manifest {
                line: 0,
                msg: format!("frame {} is not backed by files", r.describe()),
            });
        };
        let mut row = vec![
            r.subject_id.clone(),
            r.video_id.clone(),
            r.frame_id.clone(),
            img.display().to_string(),
            lm.display().to_string(),
        ];
        row.extend(r.labels.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Videos in order of first appearance with their record indices.
fn videos(records: &[SampleRecord]) -> Vec<Vec<usize>> {
    let mut index: HashMap<(&str, &str), usize> = HashMap::new();
    let mut out: Vec<Vec<usize>> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let key = (r.subject_id.as_str(), r.video_id.as_str());
        let slot = *index.entry(key).or_insert_with(|| {
            out.push(Vec::new());
            out.len() - 1
        });
        out[slot].push(i);
    }
    out
}

/// Per video, up to `per_video_pos` frames with any active AU and up to
/// `per_video_neg` all-negative frames, without replacement. Returns record
/// indices, video by video.
pub fn balanced_sample(manifest: &DatasetManifest, per_video_pos: usize, per_video_neg: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut out = Vec::new();
    for frames in videos(&manifest.records) {
        let (mut pos, mut neg): (Vec<usize>, Vec<usize>) =
            frames.iter().partition(|&&i| manifest.records[i].is_positive());
        rng.shuffle(&mut pos);
        rng.shuffle(&mut neg);
        if pos.len() < per_video_pos || neg.len() < per_video_neg {
            let r = &manifest.records[frames[0]];
            info!(
                "video {}/{}: {} positive and {} negative frames available, requested {per_video_pos}/{per_video_neg}",
                r.subject_id,
                r.video_id,
                pos.len(),
                neg.len()
            );
        }
        out.extend(pos.into_iter().take(per_video_pos));
        out.extend(neg.into_iter().take(per_video_neg));
    }
    out
}

/// Subject → fold (0, 1 or 2).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.folds.get(subject).copied()
    }

    pub fn sizes(&self) -> [usize; 3] {
        let mut s = [0; 3];
        for &f in self.folds.values() {
            s[f] += 1;
        }
        s
    }

    /// Indices of records in `fold` (`test`) and in the other folds (`train`).
    pub fn partition(&self, records: &[SampleRecord], fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..records.len()).partition(|&i| self.fold_of(&records[i].subject_id) != Some(fold))
    }
}

/// Shuffles the distinct subjects and deals them into three folds; sizes
/// differ by at most one.
pub fn split_3fold(manifest: &DatasetManifest, rng: &mut SeededRng) -> Result<FoldAssignment> {
    split_subjects(manifest.subjects(), rng)
}

/// [`split_3fold`] over an explicit subject set.
pub fn split_subjects(subjects: BTreeSet<String>, rng: &mut SeededRng) -> Result<FoldAssignment> {
    let mut subjects: Vec<String> = subjects.into_iter().collect();
    if subjects.len() < 3 {
        return Err(Error::TooFewSubjects(subjects.len()));
    }
    rng.shuffle(&mut subjects);
    let folds = subjects.into_iter().enumerate().map(|(i, s)| (s, i % 3)).collect();
    Ok(FoldAssignment { folds })
}

/// A frame reduced to its ROI patches.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub subject_id: String,
    pub video_id: String,
    pub frame_id: String,
    pub labels: Vec<u8>,
    /// One flattened `n×n×ch` patch per ROI, in layout order.
    pub patches: Vec<Vec<f64>>,
}

/// Examples cropped for one layout.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSet {
    pub name: String,
    pub au_ids: Vec<u32>,
    pub n: usize,
    pub channels: usize,
    pub num_rois: usize,
    pub examples: Vec<Example>,
}

fn load_record_image(record: &SampleRecord, layout: &RoiLayout) -> Result<Tensor> {
    match &record.image {
        ImageSource::Path(p) => load_image(p),
        ImageSource::Inline(t) => Ok(t.clone()),
        ImageSource::Synthetic(spec) => render_image(spec, &record.labels, layout),
    }
}

fn load_record_landmarks(record: &SampleRecord, width: usize, height: usize) -> Result<LandmarkSet> {
    match &record.landmarks {
        LandmarkSource::Path(p) => LandmarkSet::load_csv(p, IBUG68, width, height),
        LandmarkSource::Inline(l) => Ok(l.clone()),
    }
}

/// Crops every record of `manifest` (or the listed `indices`) into patches.
pub fn prepare(manifest: &DatasetManifest, layout: &RoiLayout, indices: Option<&[usize]>) -> Result<PreparedSet> {
    if manifest.au_ids != layout.au_ids {
        return Err(Error::Config(format!(
            "manifest AUs {:?} do not match layout AUs {:?}",
            manifest.au_ids, layout.au_ids
        )));
    }
    let all: Vec<usize> = (0..manifest.records.len()).collect();
    let indices = indices.unwrap_or(&all);
    let mut examples = Vec::with_capacity(indices.len());
    let mut channels = 0;
    for &i in indices {
        let record = &manifest.records[i];
        let image = load_record_image(record, layout)?;
        let (h, w, ch) = match *image.shape() {
            [h, w, ch] => (h, w, ch),
            _ => unreachable!("images are H×W×ch"),
        };
        if channels == 0 {
            channels = ch;
        } else if ch != channels {
            return Err(Error::Size(format!("frame {} has {ch} channels, expected {channels}", record.describe())));
        }
        let landmarks = load_record_landmarks(record, w, h)?;
        let patches = layout
            .extract_patches(&image, &landmarks)?
            .into_iter()
            .map(Tensor::into_data)
            .collect();
        examples.push(Example {
            subject_id: record.subject_id.clone(),
            video_id: record.video_id.clone(),
            frame_id: record.frame_id.clone(),
            labels: record.labels.clone(),
            patches,
        });
    }
    Ok(PreparedSet {
        name: manifest.name.clone(),
        au_ids: manifest.au_ids.clone(),
        n: layout.roi_size(),
        channels: channels.max(1),
        num_rois: layout.num_rois(),
        examples,
    })
}

const PATCH_MAGIC: &[u8; 5] = b"AUPAT";
const PATCH_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let len = get_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Fixture(format!("patch cache string: {e}")))
}

impl PreparedSet {
    pub fn input_len(&self) -> usize {
        self.n * self.n * self.channels
    }

    pub fn labels(&self) -> Vec<Vec<u8>> {
        self.examples.iter().map(|e| e.labels.clone()).collect()
    }

    pub fn subjects(&self) -> BTreeSet<String> {
        self.examples.iter().map(|e| e.subject_id.clone()).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> PreparedSet {
        PreparedSet {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> PreparedSet {
        PreparedSet {
            name: self.name.clone(),
            au_ids: self.au_ids.clone(),
            n: self.n,
            channels: self.channels,
            num_rois: self.num_rois,
            examples: Vec::new(),
        }
    }

    /// Splits by subject fold: `(train, test)`.
    pub fn split(&self, folds: &FoldAssignment, test_fold: usize) -> (PreparedSet, PreparedSet) {
        let (train, test): (Vec<usize>, Vec<usize>) =
            (0..self.examples.len()).partition(|&i| folds.fold_of(&self.examples[i].subject_id) != Some(test_fold));
        (self.subset(&train), self.subset(&test))
    }

    /// Little-endian patch cache: magic `AUPAT`, u32 version, name, n, ch,
    /// R, C, the AU ids, N, then per example three id strings, C label bytes
    /// and R·n²·ch f64 values.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(PATCH_MAGIC)?;
        put_u32(&mut w, PATCH_VERSION)?;
        put_str(&mut w, &self.name)?;
        for v in [self.n, self.channels, self.num_rois, self.au_ids.len()] {
            put_u32(&mut w, v as u32)?;
        }
        for &a in &self.au_ids {
            put_u32(&mut w, a)?;
        }
        put_u32(&mut w, self.examples.len() as u32)?;
        for e in &self.examples {
            put_str(&mut w, &e.subject_id)?;
            put_str(&mut w, &e.video_id)?;
            put_str(&mut w, &e.frame_id)?;
            w.write_all(&e.labels)?;
            for p in &e.patches {
                for v in p {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != PATCH_MAGIC {
            return Err(Error::Fixture(format!("{} is not a patch cache", path.display())));
        }
        let version = get_u32(&mut r)?;
        if version != PATCH_VERSION {
            return Err(Error::Fixture(format!("unsupported patch cache version {version}")));
        }
        let name = get_str(&mut r)?;
        let n = get_u32(&mut r)? as usize;
        let channels = get_u32(&mut r)? as usize;
        let num_rois = get_u32(&mut r)? as usize;
        let c = get_u32(&mut r)? as usize;
        let au_ids = (0..c).map(|_| get_u32(&mut r)).collect::<Result<Vec<_>>>()?;
        let count = get_u32(&mut r)? as usize;
        let input = n * n * channels;
        let mut examples = Vec::with_capacity(count);
        let mut buf = vec![0u8; input * 8];
        for _ in 0..count {
            let subject_id = get_str(&mut r)?;
            let video_id = get_str(&mut r)?;
            let frame_id = get_str(&mut r)?;
            let mut labels = vec![0u8; c];
            r.read_exact(&mut labels)?;
            let mut patches = Vec::with_capacity(num_rois);
            for _ in 0..num_rois {
                r.read_exact(&mut buf)?;
                patches.push(
                    buf.chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                        .collect(),
                );
            }
            examples.push(Example {
                subject_id,
                video_id,
                frame_id,
                labels,
                patches,
            });
        }
        Ok(Self {
            name,
            au_ids,
            n,
            channels,
            num_rois,
            examples,
        })
    }
}

/// Logs per-AU positive counts of a prepared set.
pub fn log_label_summary(set: &PreparedSet) {
    for (k, au) in set.au_ids.iter().enumerate() {
        let pos = set.examples.iter().filter(|e| e.labels[k] != 0).count();
        if pos == 0 {
            warn!("AU{au} has no positive examples");
        }
        info!("AU{au}: {pos}/{} positive", set.examples.len());
    }
}
