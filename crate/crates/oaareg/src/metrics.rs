//! Evaluation quantities: inlier ratio, feature matching recall, registration
//! errors and recall, chamfer distance, patch-level statistics, and the
//! overlap binary-classification score.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coarse::PatchCorrespondenceSet;
use crate::fine::PatchAssignment;
use crate::geometry::{apply_transform, CorrespondenceSet, PointCloud, RigidTransform};

/// Residual threshold for counting a correspondence as an inlier (meters).
pub const INLIER_TAU_M: f64 = 0.1;
/// Minimum inlier ratio for a feature-matching-recall hit.
pub const FMR_MIN_IR: f64 = 0.05;
/// RMSE bound of the indoor-style registration criterion (meters).
pub const RMSE_MAX_M: f64 = 0.2;
/// Rotation-error bound of the outdoor-style criterion (degrees).
pub const RRE_MAX_DEG: f64 = 5.0;
/// Translation-error bound of the outdoor-style criterion (meters).
pub const RTE_MAX_M: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("input must be nonempty")]
    EmptyInput,
    #[error("sequence lengths differ: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("cloud size {cloud} does not match the correspondence set ({expected})")]
    CloudSizeMismatch { cloud: usize, expected: usize },
}

/// Which criterion `rr` is judged by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallCriterion {
    /// RMSE < 0.2 m (indoor-style).
    Rmse,
    /// RRE < 5 degrees and RTE < 2 m (outdoor-style).
    RreRte,
}

/// One evaluation record; serializes with fixed field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ir: f64,
    pub fmr: f64,
    pub rr: f64,
    pub rre_deg: f64,
    pub rte_m: f64,
    pub rmse_m: f64,
    pub chamfer: f64,
    pub pir: f64,
    pub pop: f64,
    pub overlap_bce: f64,
    pub counts: ReportCounts,
    pub thresholds: ReportThresholds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub source_points: usize,
    pub target_points: usize,
    pub source_superpoints: usize,
    pub target_superpoints: usize,
    pub patch_pairs: usize,
    pub correspondences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportThresholds {
    pub inlier_tau_m: f64,
    pub fmr_min_ir: f64,
    pub rmse_max_m: f64,
    pub rre_max_deg: f64,
    pub rte_max_m: f64,
    pub rr_criterion: RecallCriterion,
}

impl Default for ReportThresholds {
    fn default() -> Self {
        Self {
            inlier_tau_m: INLIER_TAU_M,
            fmr_min_ir: FMR_MIN_IR,
            rmse_max_m: RMSE_MAX_M,
            rre_max_deg: RRE_MAX_DEG,
            rte_max_m: RTE_MAX_M,
            rr_criterion: RecallCriterion::Rmse,
        }
    }
}

/// Inlier ratio of a correspondence set under the ground-truth transform,
/// plus whether it clears the feature-matching-recall bar. An empty set has
/// ratio 0 and no hit.
pub fn inlier_stats(
    c: &CorrespondenceSet,
    src: &PointCloud,
    tgt: &PointCloud,
    gt: &RigidTransform,
    tau: f64,
    fmr_threshold: f64,
) -> Result<(f64, bool), MetricsError> {
    if src.len() != c.src_len() {
        return Err(MetricsError::CloudSizeMismatch {
            cloud: src.len(),
            expected: c.src_len(),
        });
    }
    if tgt.len() != c.tgt_len() {
        return Err(MetricsError::CloudSizeMismatch {
            cloud: tgt.len(),
            expected: c.tgt_len(),
        });
    }
    if c.is_empty() {
        return Ok((0.0, false));
    }
    let inliers = c
        .pairs()
        .iter()
        .filter(|p| {
            let r = gt.apply(src.point(p.source_index)) - tgt.point(p.target_index);
            r.norm() < tau
        })
        .count();
    let ir = inliers as f64 / c.len() as f64;
    Ok((ir, ir > fmr_threshold))
}

/// Relative rotation error (degrees), relative translation error (meters) and
/// the RMSE between the two placements of the source cloud.
///
/// The rotation error is the geodesic distance `acos((trace(R_gt^T R_est) - 1) / 2)`;
/// it is evaluated through `atan2` of the skew/trace parts, which computes the
/// same angle without the cancellation the naive arccosine suffers near zero.
pub fn registration_errors(
    est: &RigidTransform,
    gt: &RigidTransform,
    src: &PointCloud,
) -> (f64, f64, f64) {
    let rre = rotation_geodesic_deg(est, gt);
    let rte = (est.translation() - gt.translation()).norm();
    let rmse = if src.is_empty() {
        0.0
    } else {
        let sum: f64 = src
            .points()
            .iter()
            .map(|p| (est.apply(p) - gt.apply(p)).norm_squared())
            .sum();
        (sum / src.len() as f64).sqrt()
    };
    (rre, rte, rmse)
}

fn rotation_geodesic_deg(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    let rel = gt.rotation().transpose() * est.rotation();
    let cos = (rel.trace() - 1.0) / 2.0;
    // |skew(rel)|_F = sqrt(2) * |sin(angle)|
    let skew = (rel - rel.transpose()) / 2.0;
    let sin = skew.norm() / std::f64::consts::SQRT_2;
    sin.atan2(cos).to_degrees()
}

/// Whether the errors pass the configured registration-recall criterion.
pub fn registration_pass(
    rre_deg: f64,
    rte_m: f64,
    rmse_m: f64,
    criterion: RecallCriterion,
    thresholds: &ReportThresholds,
) -> bool {
    match criterion {
        RecallCriterion::Rmse => rmse_m < thresholds.rmse_max_m,
        RecallCriterion::RreRte => {
            rre_deg < thresholds.rre_max_deg && rte_m < thresholds.rte_max_m
        }
    }
}

/// Symmetric chamfer distance: the average of the two directional means of
/// nearest-neighbor squared distances.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let directional = |from: &PointCloud, to: &PointCloud| -> f64 {
        // Per-point minima in parallel, summed sequentially so the result
        // does not depend on the reduction order.
        let minima: Vec<f64> = from
            .points()
            .par_iter()
            .map(|p| {
                to.points()
                    .iter()
                    .map(|q| (p - q).norm_squared())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        minima.iter().sum::<f64>() / from.len() as f64
    };
    Ok(0.5 * (directional(a, b) + directional(b, a)))
}

/// Ground-truth overlap structure at the patch level.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapTruth {
    /// Superpoint pairs whose patches truly overlap under the ground truth.
    pub true_pairs: HashSet<(usize, usize)>,
    /// Per-superpoint overlap labels derived from `true_pairs`.
    pub src_labels: Vec<bool>,
    pub tgt_labels: Vec<bool>,
}

/// Computes which patch pairs truly overlap: pair (i, j) counts iff some
/// dense point of patch i lands within `tau` of some dense point of patch j
/// under the ground-truth transform.
pub fn patch_overlap_truth(
    dense_src: &PointCloud,
    dense_tgt: &PointCloud,
    src_assign: &PatchAssignment,
    tgt_assign: &PatchAssignment,
    gt: &RigidTransform,
    tau: f64,
) -> OverlapTruth {
    let moved = apply_transform(gt, dense_src);
    let tau2 = tau * tau;
    let pair_lists: Vec<HashSet<(usize, usize)>> = (0..moved.len())
        .into_par_iter()
        .map(|i| {
            let mut local = HashSet::new();
            let pi = moved.point(i);
            let sp_i = src_assign.patch_of()[i];
            for (j, q) in dense_tgt.points().iter().enumerate() {
                if (pi - q).norm_squared() < tau2 {
                    local.insert((sp_i, tgt_assign.patch_of()[j]));
                }
            }
            local
        })
        .collect();

    let mut true_pairs = HashSet::new();
    for local in pair_lists {
        true_pairs.extend(local);
    }
    let mut src_labels = vec![false; src_assign.superpoint_count()];
    let mut tgt_labels = vec![false; tgt_assign.superpoint_count()];
    for &(i, j) in &true_pairs {
        src_labels[i] = true;
        tgt_labels[j] = true;
    }
    OverlapTruth {
        true_pairs,
        src_labels,
        tgt_labels,
    }
}

/// Patch inlier ratio and patch overlap precision.
///
/// `pir` is the fraction of proposed patch pairs whose patches truly overlap.
/// `pop` is the precision of the predicted per-superpoint overlap labels
/// against the true labels, pooled over both clouds.
pub fn patch_stats(
    patch_pairs: &PatchCorrespondenceSet,
    predicted_src: &[bool],
    predicted_tgt: &[bool],
    truth: &OverlapTruth,
) -> Result<(f64, f64), MetricsError> {
    if predicted_src.len() != truth.src_labels.len() {
        return Err(MetricsError::LengthMismatch {
            a: predicted_src.len(),
            b: truth.src_labels.len(),
        });
    }
    if predicted_tgt.len() != truth.tgt_labels.len() {
        return Err(MetricsError::LengthMismatch {
            a: predicted_tgt.len(),
            b: truth.tgt_labels.len(),
        });
    }

    let pir = if patch_pairs.is_empty() {
        0.0
    } else {
        let hits = patch_pairs
            .pairs()
            .iter()
            .filter(|p| truth.true_pairs.contains(&(p.src, p.tgt)))
            .count();
        hits as f64 / patch_pairs.len() as f64
    };

    let mut tp = 0usize;
    let mut fp = 0usize;
    let pooled = predicted_src
        .iter()
        .zip(&truth.src_labels)
        .chain(predicted_tgt.iter().zip(&truth.tgt_labels));
    for (&pred, &label) in pooled {
        if pred {
            if label {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let pop = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    Ok((pir, pop))
}

/// Overlap classification score: the mean of
/// `label * ln(score) + (1 - label) * ln(1 - score)`.
///
/// Note the sign: this is the negated conventional binary cross entropy, so
/// perfect predictions approach 0 from below and chance sits at `ln(0.5)`.
/// Scores are clamped into `[1e-12, 1 - 1e-12]` before the logarithms.
pub fn overlap_bce(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            a: scores.len(),
            b: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let sum: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &label)| {
            let s = s.clamp(1e-12, 1.0 - 1e-12);
            if label {
                s.ln()
            } else {
                (1.0 - s).ln()
            }
        })
        .sum();
    Ok(sum / scores.len() as f64)
}

/// The conventional (positive) binary cross entropy: `-overlap_bce`.
pub fn overlap_bce_loss(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    overlap_bce(scores, labels).map(|v| -v)
}
