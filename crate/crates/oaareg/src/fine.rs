//! Fine-level matching: propagate patch correspondences to dense points and
//! extract strict one-to-one dense correspondences through optimal transport
//! with a dustbin.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::FeatureMatrix;
use crate::coarse::PatchCorrespondenceSet;
use crate::geometry::{Correspondence, CorrespondenceSet, GeometryError, PointCloud};

#[derive(Debug, Error, PartialEq)]
pub enum FineError {
    #[error("input cloud must be nonempty")]
    EmptyInput,
    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFiniteCost { row: usize, col: usize },
    #[error("sinkhorn needs at least one iteration")]
    NoIterations,
    #[error("cost matrix must be nonempty")]
    EmptyCost,
    #[error("patch pair references empty patch of superpoint {superpoint}")]
    EmptyPatch { superpoint: usize },
    #[error("patch pair references superpoint {superpoint} outside the assignment")]
    PatchOutOfRange { superpoint: usize },
    #[error("dense feature rows ({rows}) do not match the cloud size ({expected})")]
    FeatureRowsMismatch { rows: usize, expected: usize },
    #[error("dense feature row {row} has zero norm")]
    ZeroNormFeature { row: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Nearest-superpoint partition of a dense cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchAssignment {
    patch_of: Vec<usize>,
    patches: Vec<Vec<usize>>,
}

impl PatchAssignment {
    /// Superpoint index owning each dense point.
    pub fn patch_of(&self) -> &[usize] {
        &self.patch_of
    }

    /// Dense point indices grouped per superpoint.
    pub fn patch(&self, superpoint: usize) -> &[usize] {
        &self.patches[superpoint]
    }

    pub fn superpoint_count(&self) -> usize {
        self.patches.len()
    }

    pub fn dense_count(&self) -> usize {
        self.patch_of.len()
    }
}

/// Assigns every dense point to its nearest superpoint (ties toward the
/// lowest superpoint index).
pub fn assign_patches(
    dense: &PointCloud,
    superpoints: &PointCloud,
) -> Result<PatchAssignment, FineError> {
    if dense.is_empty() || superpoints.is_empty() {
        return Err(FineError::EmptyInput);
    }
    let mut patch_of = Vec::with_capacity(dense.len());
    let mut patches = vec![Vec::new(); superpoints.len()];
    for (i, p) in dense.points().iter().enumerate() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (s, anchor) in superpoints.points().iter().enumerate() {
            let d = (p - anchor).norm_squared();
            if d < best_d {
                best_d = d;
                best = s;
            }
        }
        patch_of.push(best);
        patches[best].push(i);
    }
    Ok(PatchAssignment { patch_of, patches })
}

/// Sinkhorn tunables. The temperature scales negated-similarity costs into
/// logits; the dustbin score is the fixed logit of the slack row/column.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SinkhornParams {
    pub iterations: usize,
    pub temperature: f64,
    pub dustbin_score: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self {
            iterations: 100,
            temperature: 0.1,
            dustbin_score: 1.0,
        }
    }
}

/// Transport plan returned by [`sinkhorn`]. With a dustbin the matrix is
/// (m+1) x (n+1); the last row/column absorb unmatched mass.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    values: DMatrix<f64>,
    rows: usize,
    cols: usize,
    with_dustbin: bool,
}

impl TransportPlan {
    /// Full plan including the dustbin row/column when present.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Interior size (without dustbin).
    pub fn interior_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn has_dustbin(&self) -> bool {
        self.with_dustbin
    }

    /// Prescribed row marginals (interior rows first).
    pub fn row_targets(&self) -> Vec<f64> {
        let mut t = vec![1.0; self.rows];
        if self.with_dustbin {
            t.push(self.cols as f64);
        } else if self.rows != self.cols {
            // Balanced problem with unequal sides: rows keep unit mass and
            // columns share the total.
            return vec![1.0; self.rows];
        }
        t
    }

    /// Prescribed column marginals (interior columns first).
    pub fn col_targets(&self) -> Vec<f64> {
        if self.with_dustbin {
            let mut t = vec![1.0; self.cols];
            t.push(self.rows as f64);
            t
        } else {
            vec![self.rows as f64 / self.cols as f64; self.cols]
        }
    }

    /// Sum of absolute deviations of the plan marginals from their targets.
    pub fn marginal_error(&self) -> f64 {
        let mut err = 0.0;
        for (i, target) in self.row_targets().iter().enumerate() {
            err += (self.values.row(i).sum() - target).abs();
        }
        for (j, target) in self.col_targets().iter().enumerate() {
            err += (self.values.column(j).sum() - target).abs();
        }
        err
    }
}

/// Log-domain Sinkhorn with alternating row/column normalization.
///
/// Costs enter the log domain as `-cost`; interior rows carry unit mass.
/// With `with_dustbin` the plan gains a slack row/column whose marginals are
/// the opposite side's size, as in the usual dustbin formulation. Use
/// [`sinkhorn_with`] to rescale sharper costs by a temperature.
pub fn sinkhorn(
    cost: &DMatrix<f64>,
    iterations: usize,
    with_dustbin: bool,
) -> Result<TransportPlan, FineError> {
    sinkhorn_with(
        cost,
        &SinkhornParams {
            iterations,
            temperature: 1.0,
            dustbin_score: 1.0,
        },
        with_dustbin,
    )
}

pub fn sinkhorn_with(
    cost: &DMatrix<f64>,
    params: &SinkhornParams,
    with_dustbin: bool,
) -> Result<TransportPlan, FineError> {
    if params.iterations == 0 {
        return Err(FineError::NoIterations);
    }
    let (m, n) = (cost.nrows(), cost.ncols());
    if m == 0 || n == 0 {
        return Err(FineError::EmptyCost);
    }
    for i in 0..m {
        for j in 0..n {
            if !cost[(i, j)].is_finite() {
                return Err(FineError::NonFiniteCost { row: i, col: j });
            }
        }
    }

    let (rows, cols) = if with_dustbin { (m + 1, n + 1) } else { (m, n) };
    // row-major flat logits; the loops below stay allocation-free
    let mut logits = vec![params.dustbin_score; rows * cols];
    for i in 0..m {
        for j in 0..n {
            logits[i * cols + j] = -cost[(i, j)] / params.temperature;
        }
    }

    let log_mu: Vec<f64> = if with_dustbin {
        let mut v = vec![0.0; m];
        v.push((n as f64).ln());
        v
    } else {
        vec![0.0; m]
    };
    let log_nu: Vec<f64> = if with_dustbin {
        let mut v = vec![0.0; n];
        v.push((m as f64).ln());
        v
    } else {
        vec![(m as f64 / n as f64).ln(); n]
    };

    let mut u = vec![0.0; rows];
    let mut v = vec![0.0; cols];
    for _ in 0..params.iterations {
        let mut delta: f64 = 0.0;
        for i in 0..rows {
            let row = &logits[i * cols..(i + 1) * cols];
            let mut max = f64::NEG_INFINITY;
            for (l, vj) in row.iter().zip(&v) {
                max = max.max(l + vj);
            }
            let mut sum = 0.0;
            for (l, vj) in row.iter().zip(&v) {
                sum += (l + vj - max).exp();
            }
            let next = log_mu[i] - (max + sum.ln());
            delta = delta.max((next - u[i]).abs());
            u[i] = next;
        }
        for j in 0..cols {
            let mut max = f64::NEG_INFINITY;
            for i in 0..rows {
                max = max.max(logits[i * cols + j] + u[i]);
            }
            let mut sum = 0.0;
            for i in 0..rows {
                sum += (logits[i * cols + j] + u[i] - max).exp();
            }
            let next = log_nu[j] - (max + sum.ln());
            delta = delta.max((next - v[j]).abs());
            v[j] = next;
        }
        // The scalings are at a fixed point; the remaining rounds would not
        // move the plan.
        if delta < 1e-14 {
            break;
        }
    }

    let values = DMatrix::from_fn(rows, cols, |i, j| (logits[i * cols + j] + u[i] + v[j]).exp());
    Ok(TransportPlan {
        values,
        rows: m,
        cols: n,
        with_dustbin,
    })
}

/// Dense correspondence extraction inside matched patches.
///
/// Per patch pair the cost is the negated cosine similarity of the dense
/// features; the transport plan is solved with a dustbin and a pair is
/// accepted iff it is the row and column maximum of the interior plan and
/// beats the dustbin on both sides. Duplicates across overlapping patch pairs
/// are resolved globally toward the highest confidence, so the output is
/// strictly one-to-one on dense indices.
pub fn extract_dense(
    patch_pairs: &PatchCorrespondenceSet,
    src_assign: &PatchAssignment,
    tgt_assign: &PatchAssignment,
    src_feats: &FeatureMatrix,
    tgt_feats: &FeatureMatrix,
    params: &SinkhornParams,
) -> Result<CorrespondenceSet, FineError> {
    if src_feats.tokens() != src_assign.dense_count() {
        return Err(FineError::FeatureRowsMismatch {
            rows: src_feats.tokens(),
            expected: src_assign.dense_count(),
        });
    }
    if tgt_feats.tokens() != tgt_assign.dense_count() {
        return Err(FineError::FeatureRowsMismatch {
            rows: tgt_feats.tokens(),
            expected: tgt_assign.dense_count(),
        });
    }

    let src_unit = unit_rows(src_feats.as_matrix())?;
    let tgt_unit = unit_rows(tgt_feats.as_matrix())?;

    // (src dense, tgt dense) -> best confidence seen in any patch pair.
    let mut candidates: HashMap<(usize, usize), f64> = HashMap::new();
    for pair in patch_pairs.pairs() {
        if pair.src >= src_assign.superpoint_count() {
            return Err(FineError::PatchOutOfRange {
                superpoint: pair.src,
            });
        }
        if pair.tgt >= tgt_assign.superpoint_count() {
            return Err(FineError::PatchOutOfRange {
                superpoint: pair.tgt,
            });
        }
        let patch_p = src_assign.patch(pair.src);
        let patch_q = tgt_assign.patch(pair.tgt);
        if patch_p.is_empty() {
            return Err(FineError::EmptyPatch {
                superpoint: pair.src,
            });
        }
        if patch_q.is_empty() {
            return Err(FineError::EmptyPatch {
                superpoint: pair.tgt,
            });
        }

        let cost = DMatrix::from_fn(patch_p.len(), patch_q.len(), |a, b| {
            -src_unit.row(patch_p[a]).dot(&tgt_unit.row(patch_q[b]))
        });
        let plan = sinkhorn_with(&cost, params, true)?;
        let values = plan.values();
        let (m, n) = plan.interior_shape();

        for a in 0..m {
            let b = match interior_argmax((0..n).map(|b| values[(a, b)])) {
                Some(b) => b,
                None => continue,
            };
            // mutual top of the interior plan
            let best_row = interior_argmax((0..m).map(|a2| values[(a2, b)]));
            if best_row != Some(a) {
                continue;
            }
            // the dustbin must lose on both sides
            if values[(a, b)] <= values[(a, n)] || values[(a, b)] <= values[(m, b)] {
                continue;
            }
            let key = (patch_p[a], patch_q[b]);
            let conf = values[(a, b)].min(1.0);
            let e = candidates.entry(key).or_insert(conf);
            *e = e.max(conf);
        }
    }

    // Deterministic global one-to-one selection: highest confidence wins,
    // ties break toward the lowest index pair.
    let mut ordered: Vec<((usize, usize), f64)> = candidates.into_iter().collect();
    ordered.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut used_src = vec![false; src_assign.dense_count()];
    let mut used_tgt = vec![false; tgt_assign.dense_count()];
    let mut pairs = Vec::new();
    for ((s, t), conf) in ordered {
        if used_src[s] || used_tgt[t] {
            continue;
        }
        used_src[s] = true;
        used_tgt[t] = true;
        pairs.push(Correspondence {
            source_index: s,
            target_index: t,
            confidence: conf,
        });
    }
    pairs.sort_by_key(|c| (c.source_index, c.target_index));

    Ok(CorrespondenceSet::new(
        pairs,
        src_assign.dense_count(),
        tgt_assign.dense_count(),
    )?)
}

fn unit_rows(m: &DMatrix<f64>) -> Result<DMatrix<f64>, FineError> {
    let mut out = m.clone();
    for (row, mut r) in out.row_iter_mut().enumerate() {
        let norm = r.norm();
        if norm == 0.0 {
            return Err(FineError::ZeroNormFeature { row });
        }
        r /= norm;
    }
    Ok(out)
}

fn interior_argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best = None;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_val {
            best_val = v;
            best = Some(i);
        }
    }
    best
}
