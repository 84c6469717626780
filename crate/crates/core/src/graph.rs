//! AU relation statistics and the ROI adjacency matrix.
//!
//! Labels → conditional co-occurrence `M[i][j] = P(AU j | AU i)` →
//! `M_sym = M + Mᵀ` → thresholded 0/1 relation matrix → R×R ROI graph.
//! The graph connects every node to itself, each mirror pair, every pair of
//! ROIs whose AUs are related, and the global node to everything.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roi::RoiLayout;
use crate::tensor::Tensor;

pub const BP4D_FIXTURE: &str = include_str!("../fixtures/mbool_bp4d.txt");
pub const DISFA_FIXTURE: &str = include_str!("../fixtures/mbool_disfa.txt");

/// Default relation threshold on `M_sym` (range `[0, 2]`).
pub const DEFAULT_THRESHOLD: f64 = 0.6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DegeneratePolicy {
    /// Error on an AU that never occurs.
    #[default]
    Strict,
    /// Zero row with unit diagonal, logged.
    Permissive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CondProbMatrix {
    pub au_ids: Vec<u32>,
    /// `m[i][j] = P(AU j = 1 | AU i = 1)`.
    pub m: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    pub au_ids: Vec<u32>,
    pub m: Tensor,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolRelationMatrix {
    pub au_ids: Vec<u32>,
    pub m: Vec<Vec<bool>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjacencyMode {
    #[default]
    Raw,
    Row,
    Symmetric,
}

impl std::str::FromStr for AdjacencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "row" => Ok(Self::Row),
            "symmetric" => Ok(Self::Symmetric),
            other => Err(Error::Config(format!("unknown adjacency mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyMatrix {
    pub g: Tensor,
    pub mode: AdjacencyMode,
}

/// Estimates `P(AU j | AU i)` from an `N×C` 0/1 label matrix.
pub fn estimate_cond_prob(labels: &[Vec<u8>], au_ids: &[u32], policy: DegeneratePolicy) -> Result<CondProbMatrix> {
    let c = au_ids.len();
    if labels.is_empty() {
        return Err(Error::Param("co-occurrence estimation needs at least one label row".into()));
    }
    let mut counts = vec![0u64; c];
    let mut joint = vec![0u64; c * c];
    for (row_idx, row) in labels.iter().enumerate() {
        if row.len() != c {
            return Err(Error::Shape {
                op: "estimate_cond_prob",
                lhs: vec![row_idx, row.len()],
                rhs: vec![c],
            });
        }
        for i in (0..c).filter(|&i| row[i] != 0) {
            counts[i] += 1;
            for j in (0..c).filter(|&j| row[j] != 0) {
                joint[i * c + j] += 1;
            }
        }
    }
    let mut m = Tensor::zeros(&[c, c]);
    for i in 0..c {
        if counts[i] == 0 {
            match policy {
                DegeneratePolicy::Strict => return Err(Error::DegenerateLabel { au: au_ids[i] }),
                DegeneratePolicy::Permissive => {
                    warn!("AU{} never occurs; its co-occurrence row is set to zero", au_ids[i]);
                    m.set(i, i, 1.0);
                    continue;
                }
            }
        }
        for j in 0..c {
            m.set(i, j, joint[i * c + j] as f64 / counts[i] as f64);
        }
    }
    Ok(CondProbMatrix {
        au_ids: au_ids.to_vec(),
        m,
    })
}

/// `M_sym[i][j] = M[i][j] + M[j][i]`.
pub fn symmetrize(m: &CondProbMatrix) -> SymMatrix {
    let c = m.au_ids.len();
    let mut out = Tensor::zeros(&[c, c]);
    for i in 0..c {
        for j in 0..c {
            out.set(i, j, m.m.get(i, j) + m.m.get(j, i));
        }
    }
    SymMatrix {
        au_ids: m.au_ids.clone(),
        m: out,
    }
}

/// Entry is 1 iff `M_sym[i][j] >= threshold`.
pub fn binarize(m: &SymMatrix, threshold: f64) -> Result<BoolRelationMatrix> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::Param(format!("relation threshold must be > 0, got {threshold}")));
    }
    let c = m.au_ids.len();
    let rows = (0..c)
        .map(|i| (0..c).map(|j| m.m.get(i, j) >= threshold).collect())
        .collect();
    Ok(BoolRelationMatrix {
        au_ids: m.au_ids.clone(),
        m: rows,
    })
}

/// Full labels → relation matrix pipeline.
pub fn relation_from_labels(
    labels: &[Vec<u8>],
    au_ids: &[u32],
    threshold: f64,
    policy: DegeneratePolicy,
) -> Result<BoolRelationMatrix> {
    binarize(&symmetrize(&estimate_cond_prob(labels, au_ids, policy)?), threshold)
}

impl BoolRelationMatrix {
    pub fn identity(au_ids: &[u32]) -> Self {
        let c = au_ids.len();
        Self {
            au_ids: au_ids.to_vec(),
            m: (0..c).map(|i| (0..c).map(|j| i == j).collect()).collect(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.m[i][j]
    }

    pub fn index_of(&self, au: u32) -> Option<usize> {
        self.au_ids.iter().position(|&a| a == au)
    }

    pub fn is_symmetric(&self) -> bool {
        let c = self.au_ids.len();
        (0..c).all(|i| (0..c).all(|j| self.m[i][j] == self.m[j][i]))
    }

    pub fn has_unit_diagonal(&self) -> bool {
        (0..self.au_ids.len()).all(|i| self.m[i][i])
    }

    /// Parses the fixture format: a header of AU ids, then C rows of C
    /// space-separated 0/1 values. Symmetry and unit diagonal are enforced.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| Error::Fixture("missing AU header line".into()))?;
        let au_ids = header
            .split_whitespace()
            .map(|t| {
                t.trim_start_matches("AU")
                    .parse::<u32>()
                    .map_err(|_| Error::Fixture(format!("bad AU id `{t}` in header")))
            })
            .collect::<Result<Vec<_>>>()?;
        let c = au_ids.len();
        let mut m = Vec::with_capacity(c);
        for (i, line) in lines.enumerate() {
            let row = line
                .split_whitespace()
                .map(|t| match t {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(Error::Fixture(format!("row {}: expected 0/1, got `{other}`", i + 1))),
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != c {
                return Err(Error::Fixture(format!("row {} has {} entries, expected {c}", i + 1, row.len())));
            }
            m.push(row);
        }
        if m.len() != c {
            return Err(Error::Fixture(format!("expected {c} rows, found {}", m.len())));
        }
        let out = Self { au_ids, m };
        if !out.is_symmetric() {
            return Err(Error::Fixture("relation matrix is not symmetric".into()));
        }
        if !out.has_unit_diagonal() {
            return Err(Error::Fixture("relation matrix diagonal is not all ones".into()));
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn bp4d() -> Self {
        Self::parse(BP4D_FIXTURE).expect("shipped BP4D fixture is valid")
    }

    pub fn disfa() -> Self {
        Self::parse(DISFA_FIXTURE).expect("shipped DISFA fixture is valid")
    }

    pub fn to_text(&self) -> String {
        let mut out = self
            .au_ids
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(" ");
        out.push('\n');
        for row in &self.m {
            let cells: Vec<&str> = row.iter().map(|&b| if b { "1" } else { "0" }).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }

    /// Restricts/reorders to `au_ids`.
    pub fn reorder(&self, au_ids: &[u32]) -> Result<Self> {
        let idx = au_ids
            .iter()
            .map(|&a| self.index_of(a).ok_or(Error::Mapping { au: a }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            au_ids: au_ids.to_vec(),
            m: idx.iter().map(|&i| idx.iter().map(|&j| self.m[i][j]).collect()).collect(),
        })
    }
}

/// Which connection rules to apply when assembling the ROI graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AssemblyRules {
    pub self_loops: bool,
    pub mirror_pairs: bool,
    pub relations: bool,
    pub global_hub: bool,
}

impl Default for AssemblyRules {
    fn default() -> Self {
        Self {
            self_loops: true,
            mirror_pairs: true,
            relations: true,
            global_hub: true,
        }
    }
}

/// Raw 0/1 ROI adjacency with all four connection rules.
pub fn assemble_graph(relations: &BoolRelationMatrix, layout: &RoiLayout) -> Result<AdjacencyMatrix> {
    assemble_graph_with(relations, layout, AssemblyRules::default())
}

pub fn assemble_graph_with(
    relations: &BoolRelationMatrix,
    layout: &RoiLayout,
    rules: AssemblyRules,
) -> Result<AdjacencyMatrix> {
    let r = layout.num_rois();
    // AU index (in relation order) for each AU carried by each ROI.
    let roi_aus = layout
        .rois
        .iter()
        .map(|roi| {
            roi.au_ids
                .iter()
                .map(|&au| relations.index_of(au).ok_or(Error::Mapping { au }))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut g = Tensor::zeros(&[r, r]);
    if rules.self_loops {
        for i in 0..r {
            g.set(i, i, 1.0);
        }
    }
    if rules.mirror_pairs {
        for &(a, b) in &layout.symmetric_pairs {
            g.set(a, b, 1.0);
            g.set(b, a, 1.0);
        }
    }
    if rules.relations {
        for a in 0..r {
            for b in 0..r {
                if a != b && roi_aus[a].iter().any(|&i| roi_aus[b].iter().any(|&j| relations.get(i, j))) {
                    g.set(a, b, 1.0);
                }
            }
        }
    }
    if rules.global_hub {
        if let Some(hub) = layout.global_index() {
            for k in 0..r {
                g.set(hub, k, 1.0);
                g.set(k, hub, 1.0);
            }
        }
    }
    Ok(AdjacencyMatrix {
        g,
        mode: AdjacencyMode::Raw,
    })
}

/// Edges of a raw graph that none of the connection rules justify, as
/// `(row, col)` pairs. Empty for a correctly assembled graph.
pub fn unjustified_edges(adj: &AdjacencyMatrix, relations: &BoolRelationMatrix, layout: &RoiLayout) -> Vec<(usize, usize)> {
    let r = layout.num_rois();
    let hub = layout.global_index();
    let mirror = layout.mirror_of();
    let related = |a: usize, b: usize| {
        layout.rois[a].au_ids.iter().any(|&x| {
            layout.rois[b].au_ids.iter().any(|&y| {
                matches!((relations.index_of(x), relations.index_of(y)), (Some(i), Some(j)) if relations.get(i, j))
            })
        })
    };
    let mut out = Vec::new();
    for a in 0..r {
        for b in 0..r {
            if adj.g.get(a, b) == 0.0 {
                continue;
            }
            let ok = a == b
                || mirror.get(&a) == Some(&b)
                || related(a, b)
                || hub == Some(a)
                || hub == Some(b);
            if !ok {
                out.push((a, b));
            }
        }
    }
    out
}

impl AdjacencyMatrix {
    pub fn identity(r: usize) -> Self {
        Self {
            g: Tensor::identity(r),
            mode: AdjacencyMode::Raw,
        }
    }

    pub fn size(&self) -> usize {
        self.g.rows()
    }

    pub fn is_symmetric(&self) -> bool {
        let r = self.size();
        (0..r).all(|i| (0..r).all(|j| self.g.get(i, j) == self.g.get(j, i)))
    }

    /// Text export: a header of ROI names, then R rows of R values.
    pub fn to_text(&self, layout: &RoiLayout) -> String {
        let mut out = layout
            .rois
            .iter()
            .map(|r| r.name())
            .collect::<Vec<_>>()
            .join(" ");
        out.push('\n');
        for i in 0..self.size() {
            let row: Vec<String> = self.g.row(i).iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Fixture("missing adjacency header".into()))?;
        let r = header.split_whitespace().count();
        let mut data = Vec::with_capacity(r * r);
        let mut rows = 0;
        for line in lines {
            let vals = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::Fixture(format!("bad adjacency value `{t}`"))))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != r {
                return Err(Error::Fixture(format!("adjacency row {} has {} values, expected {r}", rows + 1, vals.len())));
            }
            data.extend(vals);
            rows += 1;
        }
        if rows != r {
            return Err(Error::Fixture(format!("expected {r} adjacency rows, found {rows}")));
        }
        let g = Tensor::new(vec![r, r], data)?;
        let mode = if g.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            AdjacencyMode::Raw
        } else {
            AdjacencyMode::Symmetric
        };
        Ok(Self { g, mode })
    }
}

/// Raw → row-stochastic (`D⁻¹G`) or symmetric (`D^{-1/2} G D^{-1/2}`).
pub fn normalize_adjacency(adj: &AdjacencyMatrix, mode: AdjacencyMode) -> AdjacencyMatrix {
    let r = adj.size();
    let degree: Vec<f64> = (0..r).map(|i| adj.g.row(i).iter().sum()).collect();
    let mut g = adj.g.clone();
    match mode {
        AdjacencyMode::Raw => {}
        AdjacencyMode::Row => {
            for i in 0..r {
                assert!(degree[i] > 0.0, "node {i} has zero degree");
                for j in 0..r {
                    g.set(i, j, adj.g.get(i, j) / degree[i]);
                }
            }
        }
        AdjacencyMode::Symmetric => {
            for i in 0..r {
                assert!(degree[i] > 0.0, "node {i} has zero degree");
                for j in 0..r {
                    g.set(i, j, adj.g.get(i, j) / (degree[i] * degree[j]).sqrt());
                }
            }
        }
    }
    AdjacencyMatrix { g, mode }
}
