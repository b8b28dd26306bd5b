//! Pose estimation from correspondences: the feature-similarity seeded
//! estimator (seed selection by spectral consistency, consensus expansion,
//! compatibility-weighted SVD, hypothesis selection by inlier count), a
//! classic RANSAC baseline, and plain weighted SVD.

mod consensus;
mod kernel;
mod ransac;
mod spectral;
mod svd;

pub use consensus::{build_consensus, feature_compatibility, CompatibilityMatrix, ConsensusSet};
pub use ransac::ransac_estimate;
pub use spectral::{leading_weights, select_seeds, spectral_scores, LeadingWeights};
pub use svd::weighted_svd;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CorrespondenceSet, GeometryError, PointCloud, RigidTransform};

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("correspondence set is empty")]
    EmptyCorrespondences,
    #[error("need at least {need} correspondences, got {got}")]
    TooFewCorrespondences { got: usize, need: usize },
    #[error("cloud size {cloud} does not match the correspondence set ({expected})")]
    CloudSizeMismatch { cloud: usize, expected: usize },
    #[error("descriptors are required on both clouds for feature compatibility")]
    MissingDescriptors,
    #[error("matched points have no well-defined rigid alignment (degenerate support)")]
    DegenerateGeometry,
    #[error("need at least 3 pairs with positive weight, got {got}")]
    TooFewPositiveWeights { got: usize },
    #[error("point/weight sequences have mismatched lengths")]
    LengthMismatch,
    #[error("weights must be finite and nonnegative")]
    InvalidWeights,
    #[error("matrix must be square, symmetric and nonnegative")]
    InvalidMatrix,
    #[error("no valid minimal sample found")]
    NoValidSample,
    #[error("every seed produced a degenerate consensus")]
    AllSeedsDegenerate,
    #[error("candidate list is empty")]
    NoCandidates,
    #[error("config field {field} = {value} is out of range")]
    InvalidConfig { field: &'static str, value: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// How consensus neighborhoods around a seed are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusSpace {
    /// Highest length-discrepancy consistency with the seed, source-point
    /// distance as tie-break (default). Keeps consensus sets mostly clean
    /// even at low inlier ratios.
    SeedConsistency,
    /// Nearest by source-point Euclidean distance, confidence as tie-break.
    SourceSpatial,
    /// Nearest by confidence value.
    Confidence,
}

/// Tunables of the pose estimators.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Seed non-maximum-suppression radius (meters).
    pub seed_radius: f64,
    /// Fraction of correspondences kept as seeds, in (0, 1].
    pub seed_fraction: f64,
    /// Consensus set size per seed.
    pub consensus_k: usize,
    /// Sharpness of the feature-similarity sigmoid.
    pub sigma_s: f64,
    /// Acceptance radius for inlier counting (meters).
    pub tau_a: f64,
    /// RANSAC iteration budget.
    pub ransac_iters: usize,
    /// Root seed for every random choice in this module.
    pub rng_seed: u64,
    /// Spectral scoring solves the eigen-problem on at most this many rows.
    pub spectral_cap: usize,
    /// Power iteration budget.
    pub power_iters: usize,
    /// Compare the squared residual norm against `tau_a` instead of the norm.
    pub squared_acceptance: bool,
    /// Metric for consensus neighborhoods.
    pub consensus_space: ConsensusSpace,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            seed_radius: 0.1,
            seed_fraction: 0.3,
            consensus_k: 20,
            sigma_s: 10.0,
            tau_a: 0.1,
            ransac_iters: 50_000,
            rng_seed: 0,
            spectral_cap: 3000,
            power_iters: 100,
            squared_acceptance: false,
            consensus_space: ConsensusSpace::SeedConsistency,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let positive: [(&'static str, f64); 4] = [
            ("seed_radius", self.seed_radius),
            ("sigma_s", self.sigma_s),
            ("tau_a", self.tau_a),
            ("ransac_iters", self.ransac_iters as f64),
        ];
        for (field, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(EstimatorError::InvalidConfig { field, value });
            }
        }
        if !(self.seed_fraction > 0.0 && self.seed_fraction <= 1.0) {
            return Err(EstimatorError::InvalidConfig {
                field: "seed_fraction",
                value: self.seed_fraction,
            });
        }
        if self.consensus_k < 3 {
            return Err(EstimatorError::InvalidConfig {
                field: "consensus_k",
                value: self.consensus_k as f64,
            });
        }
        if self.spectral_cap == 0 {
            return Err(EstimatorError::InvalidConfig {
                field: "spectral_cap",
                value: 0.0,
            });
        }
        if self.power_iters == 0 {
            return Err(EstimatorError::InvalidConfig {
                field: "power_iters",
                value: 0.0,
            });
        }
        Ok(())
    }
}

/// Matched source/target points of a correspondence set, flattened once so
/// hypothesis scoring does no index chasing.
pub(crate) fn matched_points(
    c: &CorrespondenceSet,
    src: &PointCloud,
    tgt: &PointCloud,
) -> Result<Vec<(Vector3<f64>, Vector3<f64>)>, EstimatorError> {
    if src.len() != c.src_len() {
        return Err(EstimatorError::CloudSizeMismatch {
            cloud: src.len(),
            expected: c.src_len(),
        });
    }
    if tgt.len() != c.tgt_len() {
        return Err(EstimatorError::CloudSizeMismatch {
            cloud: tgt.len(),
            expected: c.tgt_len(),
        });
    }
    Ok(c.pairs()
        .iter()
        .map(|p| (*src.point(p.source_index), *tgt.point(p.target_index)))
        .collect())
}

/// Number of pairs whose residual under `t` clears the acceptance test.
pub(crate) fn count_supporters(
    t: &RigidTransform,
    pairs: &[(Vector3<f64>, Vector3<f64>)],
    cfg: &EstimatorConfig,
) -> usize {
    let r = t.rotation();
    let tr = t.translation();
    pairs
        .iter()
        .filter(|(p, q)| {
            let d2 = (r * p + tr - q).norm_squared();
            if cfg.squared_acceptance {
                d2 < cfg.tau_a
            } else {
                d2 < cfg.tau_a * cfg.tau_a
            }
        })
        .count()
}

/// One even-weight refit on the supporters of `t`. Falls back to `t` when
/// the supporter set is too thin or degenerate.
pub(crate) fn refit_on_supporters(
    t: RigidTransform,
    pairs: &[(Vector3<f64>, Vector3<f64>)],
    cfg: &EstimatorConfig,
) -> RigidTransform {
    let r = t.rotation();
    let tr = t.translation();
    let (in_src, in_tgt): (Vec<_>, Vec<_>) = pairs
        .iter()
        .filter(|(p, q)| {
            let d2 = (r * p + tr - q).norm_squared();
            if cfg.squared_acceptance {
                d2 < cfg.tau_a
            } else {
                d2 < cfg.tau_a * cfg.tau_a
            }
        })
        .copied()
        .unzip();
    if in_src.len() >= 3 {
        if let Ok(refined) = weighted_svd(&in_src, &in_tgt, &vec![1.0; in_src.len()]) {
            return refined;
        }
    }
    t
}

/// Returns the candidate supported by the most correspondences under the
/// acceptance radius; ties keep the earliest candidate.
pub fn select_hypothesis(
    candidates: &[RigidTransform],
    c: &CorrespondenceSet,
    src: &PointCloud,
    tgt: &PointCloud,
    cfg: &EstimatorConfig,
) -> Result<RigidTransform, EstimatorError> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(EstimatorError::NoCandidates);
    }
    let pairs = matched_points(c, src, tgt)?;
    let best = candidates
        .par_iter()
        .enumerate()
        .map(|(i, cand)| (count_supporters(cand, &pairs, cfg), i))
        .reduce_with(|a, b| {
            // max count, ties toward the earliest candidate
            if (b.0, a.1) > (a.0, b.1) {
                b
            } else {
                a
            }
        })
        .expect("candidates nonempty")
        .1;
    Ok(candidates[best])
}

/// The full seeded estimation pipeline: spectral seed selection, consensus
/// expansion, feature-compatibility weighting, weighted SVD per seed and
/// hypothesis selection over all correspondences.
///
/// Results are invariant to the order of the input pairs: every internal
/// tie-break keys on the `(source_index, target_index)` identity rather than
/// list position.
pub fn fsr_estimate(
    c: &CorrespondenceSet,
    src: &PointCloud,
    tgt: &PointCloud,
    cfg: &EstimatorConfig,
) -> Result<RigidTransform, EstimatorError> {
    cfg.validate()?;
    if c.is_empty() {
        return Err(EstimatorError::EmptyCorrespondences);
    }
    if c.len() < cfg.consensus_k {
        return Err(EstimatorError::TooFewCorrespondences {
            got: c.len(),
            need: cfg.consensus_k,
        });
    }
    if src.descriptors().is_none() || tgt.descriptors().is_none() {
        return Err(EstimatorError::MissingDescriptors);
    }

    let canonical = c.canonicalized();
    let seeds = select_seeds(&canonical, src, tgt, cfg)?;

    let grid = match cfg.consensus_space {
        ConsensusSpace::SourceSpatial => Some(consensus::SourceGrid::build(&canonical, src)),
        ConsensusSpace::SeedConsistency | ConsensusSpace::Confidence => None,
    };
    let rows = match cfg.consensus_space {
        ConsensusSpace::SeedConsistency => Some(kernel::pair_rows(&canonical, src, tgt)),
        _ => None,
    };

    let candidates: Vec<Option<RigidTransform>> = seeds
        .par_iter()
        .map_init(Vec::new, |scratch, &seed| {
            let cs = match (&grid, &rows) {
                (Some(grid), _) => {
                    consensus::build_consensus_with_grid(seed, &canonical, src, tgt, cfg, grid)
                        .ok()?
                }
                (None, Some(rows)) => consensus::build_consensus_consistency_fast(
                    seed, rows, &canonical, cfg, scratch,
                )
                .ok()?,
                (None, None) => build_consensus(seed, &canonical, src, tgt, cfg).ok()?,
            };
            let cm = feature_compatibility(&cs, &canonical, src, tgt, cfg).ok()?;
            let lw = leading_weights(cm.values(), cfg.power_iters).ok()?;
            let (ps, qs): (Vec<_>, Vec<_>) = cs
                .members()
                .iter()
                .map(|&m| {
                    let pair = &canonical.pairs()[m];
                    (*src.point(pair.source_index), *tgt.point(pair.target_index))
                })
                .unzip();
            weighted_svd(&ps, &qs, lw.weights.as_slice()).ok()
        })
        .collect();

    let candidates: Vec<RigidTransform> = candidates.into_iter().flatten().collect();
    if candidates.is_empty() {
        return Err(EstimatorError::AllSeedsDegenerate);
    }

    // Consensus sets at moderate inlier ratios are always somewhat
    // contaminated, so every candidate gets the same even-weight refit on
    // its supporters that the RANSAC baseline applies to its winner; the
    // count selection then compares refined hypotheses.
    let pairs = matched_points(&canonical, src, tgt)?;
    let candidates: Vec<RigidTransform> = candidates
        .into_par_iter()
        .map(|t| refit_on_supporters(t, &pairs, cfg))
        .collect();

    let best = select_hypothesis(&candidates, &canonical, src, tgt, cfg)?;
    Ok(refit_on_supporters(best, &pairs, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_transform, Correspondence};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, Matrix3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn rotation_about_z(angle: f64) -> Matrix3<f64> {
        nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), angle).into_inner()
    }

    /// A noise-free instance: random cloud, random transform, identity
    /// correspondences plus a controllable fraction of mismatches.
    pub(crate) fn planted_instance(
        seed: u64,
        n: usize,
        inlier_ratio: f64,
    ) -> (CorrespondenceSet, PointCloud, PointCloud, RigidTransform) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                )
            })
            .collect();
        let desc_dim = 8;
        let desc = DMatrix::from_fn(n, desc_dim, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let src = PointCloud::with_descriptors(pts, desc.clone()).unwrap();

        let angle = rng.random::<f64>() * 1.5;
        let t = RigidTransform::try_new(
            rotation_about_z(angle),
            Vector3::new(rng.random(), rng.random(), rng.random()),
        )
        .unwrap();
        let tgt = apply_transform(&t, &src);

        let inliers = (n as f64 * inlier_ratio).round() as usize;
        let pairs: Vec<Correspondence> = (0..n)
            .map(|i| {
                let target_index = if i < inliers {
                    i
                } else {
                    // a wrong partner, deterministic but scattered
                    (i * 7 + 3) % n
                };
                Correspondence {
                    source_index: i,
                    target_index,
                    confidence: 1.0,
                }
            })
            .filter({
                // drop accidental duplicates from the mismatch formula
                let mut seen = std::collections::HashSet::new();
                move |c| seen.insert((c.source_index, c.target_index))
            })
            .collect();
        let set = CorrespondenceSet::new(pairs, n, n).unwrap();
        (set, src, tgt, t)
    }

    #[test]
    fn select_hypothesis_single_candidate_returned() {
        let (c, src, tgt, t) = planted_instance(50, 30, 1.0);
        let cfg = EstimatorConfig::default();
        let out = select_hypothesis(&[t], &c, &src, &tgt, &cfg).unwrap();
        assert_eq!(out.rotation(), t.rotation());
    }

    #[test]
    fn select_hypothesis_prefers_ground_truth_over_identity() {
        let (c, src, tgt, t) = planted_instance(51, 40, 1.0);
        let cfg = EstimatorConfig::default();
        let out =
            select_hypothesis(&[RigidTransform::identity(), t], &c, &src, &tgt, &cfg).unwrap();
        assert_eq!(out.rotation(), t.rotation());
        let pairs = matched_points(&c, &src, &tgt).unwrap();
        assert_eq!(count_supporters(&t, &pairs, &cfg), c.len());
    }

    #[test]
    fn select_hypothesis_matches_recount_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let (c, src, tgt, _) = planted_instance(53, 60, 0.5);
        let cfg = EstimatorConfig::default();
        let candidates: Vec<RigidTransform> = (0..6)
            .map(|_| {
                RigidTransform::try_new(
                    rotation_about_z(rng.random::<f64>() * 3.0),
                    Vector3::new(rng.random(), rng.random(), rng.random()),
                )
                .unwrap()
            })
            .collect();
        let out = select_hypothesis(&candidates, &c, &src, &tgt, &cfg).unwrap();

        // independent recount
        let pairs = matched_points(&c, &src, &tgt).unwrap();
        let counts: Vec<usize> = candidates
            .iter()
            .map(|cand| {
                pairs
                    .iter()
                    .filter(|(p, q)| (cand.rotation() * p + cand.translation() - q).norm() < cfg.tau_a)
                    .count()
            })
            .collect();
        let best = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .unwrap()
            .0;
        assert_eq!(out.rotation(), candidates[best].rotation());
    }

    #[test]
    fn fsr_recovers_exactly_on_clean_instance() {
        let (c, src, tgt, t) = planted_instance(54, 120, 1.0);
        let cfg = EstimatorConfig::default();
        let est = fsr_estimate(&c, &src, &tgt, &cfg).unwrap();
        let rel = est.rotation().transpose() * t.rotation();
        let angle = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
        assert!(angle.to_degrees() < 1e-6, "angle {angle}");
        assert!((est.translation() - t.translation()).norm() < 1e-9);
    }

    #[test]
    fn fsr_tolerates_outliers() {
        let (c, src, tgt, t) = planted_instance(55, 200, 0.5);
        let cfg = EstimatorConfig::default();
        let est = fsr_estimate(&c, &src, &tgt, &cfg).unwrap();
        let rel = est.rotation().transpose() * t.rotation();
        let angle = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
        assert!(angle.to_degrees() < 2.0);
        assert!((est.translation() - t.translation()).norm() < 0.05);
    }

    #[test]
    fn fsr_is_invariant_to_pair_order() {
        let (c, src, tgt, _) = planted_instance(56, 80, 0.6);
        let cfg = EstimatorConfig::default();
        let a = fsr_estimate(&c, &src, &tgt, &cfg).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let mut pairs = c.pairs().to_vec();
        for i in (1..pairs.len()).rev() {
            let j = rng.random_range(0..=i);
            pairs.swap(i, j);
        }
        let shuffled = CorrespondenceSet::new(pairs, c.src_len(), c.tgt_len()).unwrap();
        let b = fsr_estimate(&shuffled, &src, &tgt, &cfg).unwrap();

        assert_eq!(a.rotation(), b.rotation());
        assert_eq!(a.translation(), b.translation());
    }

    #[test]
    fn fsr_requires_descriptors_and_enough_pairs() {
        let (c, src, tgt, _) = planted_instance(58, 30, 1.0);
        let cfg = EstimatorConfig::default();

        let bare_src = PointCloud::new(src.points().to_vec()).unwrap();
        assert_eq!(
            fsr_estimate(&c, &bare_src, &tgt, &cfg).unwrap_err(),
            EstimatorError::MissingDescriptors
        );

        let few = CorrespondenceSet::new(c.pairs()[..5].to_vec(), c.src_len(), c.tgt_len()).unwrap();
        assert_eq!(
            fsr_estimate(&few, &src, &tgt, &cfg).unwrap_err(),
            EstimatorError::TooFewCorrespondences { got: 5, need: 20 }
        );
    }

    #[test]
    fn estimator_outputs_satisfy_rotation_invariants() {
        for seed in 59..62 {
            let (c, src, tgt, _) = planted_instance(seed, 100, 0.7);
            let cfg = EstimatorConfig {
                ransac_iters: 500,
                rng_seed: seed,
                ..EstimatorConfig::default()
            };
            for est in [
                fsr_estimate(&c, &src, &tgt, &cfg).unwrap(),
                ransac_estimate(&c, &src, &tgt, &cfg).unwrap(),
            ] {
                let r = est.rotation();
                let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
                assert!(dev < 1e-9);
                assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-9);
            }
        }
    }
}
