//! Superpoint-level soft matching: similarity matrix, dual-softmax threshold
//! pruning, kNN expansion, and overlap-region filtering.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{FeatureMatrix, OverlapScores};

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("feature widths differ: {src} vs {tgt}")]
    WidthMismatch { src: usize, tgt: usize },
    #[error("{side} feature row {row} has zero norm and cannot be normalized")]
    ZeroNormRow { side: Side, row: usize },
    #[error("similarity matrix must be nonempty")]
    EmptyMatrix,
    #[error("similarity value {value} at ({row}, {col}) is outside (0, 1]")]
    ValueOutOfRange { row: usize, col: usize, value: f64 },
    #[error("knn = {knn} must be smaller than the superpoint counts ({src}, {tgt})")]
    KnnTooLarge { knn: usize, src: usize, tgt: usize },
    #[error("{side} neighbor-space rows ({rows}) do not match the similarity matrix ({expected})")]
    SpaceRowsMismatch {
        side: Side,
        rows: usize,
        expected: usize,
    },
    #[error("{side} overlap scores have length {got}, expected {expected}")]
    ScoreLengthMismatch {
        side: Side,
        got: usize,
        expected: usize,
    },
    #[error("config field {field} = {value} is out of range")]
    InvalidConfig { field: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Side::Source => write!(f, "source"),
            Side::Target => write!(f, "target"),
        }
    }
}

/// Which space the kNN expansion measures neighborhoods in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnnSpace {
    /// Neighbors by superpoint feature distance (default).
    Feature,
    /// Neighbors by superpoint position distance.
    Spatial,
}

/// Tunables of the coarse matching stage.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Soft-match probability threshold.
    pub theta_m: f64,
    /// Overlap confidence threshold.
    pub theta_o: f64,
    /// Neighbors added around each best match during expansion.
    pub knn: usize,
    /// Metric space for the kNN expansion.
    pub knn_space: KnnSpace,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            theta_m: 0.05,
            theta_o: 0.5,
            knn: 3,
            knn_space: KnnSpace::Feature,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), MatchError> {
        if !(self.theta_m > 0.0 && self.theta_m < 1.0) {
            return Err(MatchError::InvalidConfig {
                field: "theta_m",
                value: self.theta_m,
            });
        }
        if !(self.theta_o > 0.0 && self.theta_o < 1.0) {
            return Err(MatchError::InvalidConfig {
                field: "theta_o",
                value: self.theta_o,
            });
        }
        if self.knn < 1 {
            return Err(MatchError::InvalidConfig {
                field: "knn",
                value: self.knn as f64,
            });
        }
        Ok(())
    }
}

/// Dense matrix of superpoint feature similarities, entries in (0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: DMatrix<f64>,
}

impl SimilarityMatrix {
    /// Wraps a precomputed matrix, checking the (0, 1] range.
    pub fn from_values(values: DMatrix<f64>) -> Result<Self, MatchError> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(MatchError::EmptyMatrix);
        }
        for row in 0..values.nrows() {
            for col in 0..values.ncols() {
                let value = values[(row, col)];
                if !value.is_finite() || value <= 0.0 || value > 1.0 {
                    return Err(MatchError::ValueOutOfRange { row, col, value });
                }
            }
        }
        Ok(Self { values })
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }
}

/// Superpoint index pairs with the soft-match probability they passed with.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchCorrespondenceSet {
    pairs: Vec<PatchPair>,
    src_count: usize,
    tgt_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchPair {
    pub src: usize,
    pub tgt: usize,
    pub prob: f64,
}

impl PatchCorrespondenceSet {
    fn new(mut pairs: Vec<PatchPair>, src_count: usize, tgt_count: usize) -> Self {
        pairs.sort_by(|a, b| (a.src, a.tgt).cmp(&(b.src, b.tgt)));
        Self {
            pairs,
            src_count,
            tgt_count,
        }
    }

    pub fn pairs(&self) -> &[PatchPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn src_count(&self) -> usize {
        self.src_count
    }

    pub fn tgt_count(&self) -> usize {
        self.tgt_count
    }

    pub fn contains(&self, src: usize, tgt: usize) -> bool {
        self.pairs
            .binary_search_by(|p| (p.src, p.tgt).cmp(&(src, tgt)))
            .is_ok()
    }

    /// The subset of pairs satisfying `keep`, same superpoint counts.
    pub fn filtered(&self, keep: impl Fn(&PatchPair) -> bool) -> PatchCorrespondenceSet {
        PatchCorrespondenceSet::new(
            self.pairs.iter().filter(|p| keep(p)).copied().collect(),
            self.src_count,
            self.tgt_count,
        )
    }
}

/// L2-normalizes both feature stacks and fills `s_ij = exp(-|h_i - h_j|^2)`.
///
/// On the unit hypersphere the squared distance lies in [0, 4], so values
/// land in [e^-4, 1], with 1 exactly when the unit features coincide.
pub fn similarity(
    src_feats: &FeatureMatrix,
    tgt_feats: &FeatureMatrix,
) -> Result<SimilarityMatrix, MatchError> {
    if src_feats.dim() != tgt_feats.dim() {
        return Err(MatchError::WidthMismatch {
            src: src_feats.dim(),
            tgt: tgt_feats.dim(),
        });
    }
    if src_feats.tokens() == 0 || tgt_feats.tokens() == 0 {
        return Err(MatchError::EmptyMatrix);
    }
    let src_unit = normalize_rows(src_feats.as_matrix(), Side::Source)?;
    let tgt_unit = normalize_rows(tgt_feats.as_matrix(), Side::Target)?;

    // |a - b|^2 = 2 - 2 a.b for unit rows.
    let gram = &src_unit * tgt_unit.transpose();
    let values = gram.map(|g| (2.0 * (g - 1.0)).exp().min(1.0));
    Ok(SimilarityMatrix { values })
}

fn normalize_rows(m: &DMatrix<f64>, side: Side) -> Result<DMatrix<f64>, MatchError> {
    let mut out = m.clone();
    for (row, mut r) in out.row_iter_mut().enumerate() {
        let norm = r.norm();
        if norm == 0.0 {
            return Err(MatchError::ZeroNormRow { side, row });
        }
        r /= norm;
    }
    Ok(out)
}

/// Dual-softmax soft matching (row-wise and column-wise), keeping every pair
/// whose match probability clears `theta_m`. One-to-many matches are the
/// point: the retained count adapts to the overlap instead of a fixed top-k.
pub fn soft_match(
    s: &SimilarityMatrix,
    cfg: &MatchConfig,
) -> Result<(PatchCorrespondenceSet, PatchCorrespondenceSet), MatchError> {
    cfg.validate()?;
    let (m, n) = (s.nrows(), s.ncols());

    let mut row_pairs = Vec::new();
    for i in 0..m {
        let probs = softmax((0..n).map(|j| s.values[(i, j)]));
        for (j, p) in probs.iter().enumerate() {
            if *p >= cfg.theta_m {
                row_pairs.push(PatchPair {
                    src: i,
                    tgt: j,
                    prob: *p,
                });
            }
        }
    }

    let mut col_pairs = Vec::new();
    for j in 0..n {
        let probs = softmax((0..m).map(|i| s.values[(i, j)]));
        for (i, p) in probs.iter().enumerate() {
            if *p >= cfg.theta_m {
                col_pairs.push(PatchPair {
                    src: i,
                    tgt: j,
                    prob: *p,
                });
            }
        }
    }

    Ok((
        PatchCorrespondenceSet::new(row_pairs, m, n),
        PatchCorrespondenceSet::new(col_pairs, m, n),
    ))
}

fn softmax(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let vals: Vec<f64> = values.collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Expands each side's best match with the k nearest neighbors of that match
/// (measured between rows of the corresponding `*_space` matrix) and keeps
/// only candidates that already passed the dual-softmax threshold, i.e. the
/// union of the two soft sets. Ties in best-match and neighbor ranking break
/// toward the lowest index.
pub fn knn_expand_prune(
    s: &SimilarityMatrix,
    soft: (&PatchCorrespondenceSet, &PatchCorrespondenceSet),
    src_space: &DMatrix<f64>,
    tgt_space: &DMatrix<f64>,
    cfg: &MatchConfig,
) -> Result<PatchCorrespondenceSet, MatchError> {
    cfg.validate()?;
    let (m, n) = (s.nrows(), s.ncols());
    if cfg.knn >= m.min(n) {
        return Err(MatchError::KnnTooLarge {
            knn: cfg.knn,
            src: m,
            tgt: n,
        });
    }
    if src_space.nrows() != m {
        return Err(MatchError::SpaceRowsMismatch {
            side: Side::Source,
            rows: src_space.nrows(),
            expected: m,
        });
    }
    if tgt_space.nrows() != n {
        return Err(MatchError::SpaceRowsMismatch {
            side: Side::Target,
            rows: tgt_space.nrows(),
            expected: n,
        });
    }

    let mut passed: HashMap<(usize, usize), f64> = HashMap::new();
    for p in soft.0.pairs().iter().chain(soft.1.pairs()) {
        let e = passed.entry((p.src, p.tgt)).or_insert(p.prob);
        *e = e.max(p.prob);
    }

    let src_neighbors = neighbor_lists(src_space, cfg.knn);
    let tgt_neighbors = neighbor_lists(tgt_space, cfg.knn);

    let mut kept: HashMap<(usize, usize), f64> = HashMap::new();
    let mut keep = |src: usize, tgt: usize| {
        if let Some(&prob) = passed.get(&(src, tgt)) {
            kept.entry((src, tgt)).or_insert(prob);
        }
    };

    for i in 0..m {
        let best = argmax((0..n).map(|j| s.values[(i, j)]));
        keep(i, best);
        for &j in &tgt_neighbors[best] {
            keep(i, j);
        }
    }
    for j in 0..n {
        let best = argmax((0..m).map(|i| s.values[(i, j)]));
        keep(best, j);
        for &i in &src_neighbors[best] {
            keep(i, j);
        }
    }

    let pairs = kept
        .into_iter()
        .map(|((src, tgt), prob)| PatchPair { src, tgt, prob })
        .collect();
    Ok(PatchCorrespondenceSet::new(pairs, m, n))
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    best
}

/// For every row, the indices of its k nearest other rows (Euclidean), ties
/// toward the lower index.
fn neighbor_lists(space: &DMatrix<f64>, k: usize) -> Vec<Vec<usize>> {
    let n = space.nrows();
    (0..n)
        .map(|i| {
            let mut dists: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| ((space.row(i) - space.row(j)).norm(), j))
                .collect();
            dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            dists.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Keeps pair (i, j) iff both endpoints sit inside the predicted overlap
/// region, i.e. both scores exceed `theta_o`.
pub fn overlap_filter(
    c: &PatchCorrespondenceSet,
    src_scores: &OverlapScores,
    tgt_scores: &OverlapScores,
    cfg: &MatchConfig,
) -> Result<PatchCorrespondenceSet, MatchError> {
    cfg.validate()?;
    if src_scores.len() != c.src_count() {
        return Err(MatchError::ScoreLengthMismatch {
            side: Side::Source,
            got: src_scores.len(),
            expected: c.src_count(),
        });
    }
    if tgt_scores.len() != c.tgt_count() {
        return Err(MatchError::ScoreLengthMismatch {
            side: Side::Target,
            got: tgt_scores.len(),
            expected: c.tgt_count(),
        });
    }
    let pairs = c
        .pairs()
        .iter()
        .filter(|p| src_scores.scores[p.src] > cfg.theta_o && tgt_scores.scores[p.tgt] > cfg.theta_o)
        .copied()
        .collect();
    Ok(PatchCorrespondenceSet::new(
        pairs,
        c.src_count(),
        c.tgt_count(),
    ))
}
