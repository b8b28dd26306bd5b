//! Consensus sets around seed correspondences and their feature-similarity
//! compatibility.

use std::collections::HashMap;

use nalgebra::{DMatrix, Vector3};

use super::kernel::{consistency, pair_consistency, PairRow};
use super::{ConsensusSpace, EstimatorConfig, EstimatorError};
use crate::attention::sigmoid;
use crate::geometry::{CorrespondenceSet, PointCloud};

/// A seed correspondence with its expansion, all as indices into the pair
/// list it was built from. The seed is always the first member.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusSet {
    seed: usize,
    members: Vec<usize>,
}

impl ConsensusSet {
    /// Builds a set directly; the seed must be contained in `members`.
    pub fn new(seed: usize, members: Vec<usize>) -> Result<Self, EstimatorError> {
        if members.is_empty() || !members.contains(&seed) {
            return Err(EstimatorError::NoCandidates);
        }
        Ok(Self { seed, members })
    }

    pub fn seed(&self) -> usize {
        self.seed
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Expands a seed into its consensus set: the seed plus its `consensus_k - 1`
/// nearest correspondences under the configured space.
///
/// The default ranks by geometric consistency with the seed (source-point
/// distance breaks ties); the alternatives rank by source-point distance or
/// by confidence difference. Final ties always break on the
/// `(source_index, target_index)` identity, so the result does not depend on
/// the pair order.
pub fn build_consensus(
    seed: usize,
    c: &CorrespondenceSet,
    src: &PointCloud,
    tgt: &PointCloud,
    cfg: &EstimatorConfig,
) -> Result<ConsensusSet, EstimatorError> {
    cfg.validate()?;
    if c.len() < cfg.consensus_k {
        return Err(EstimatorError::TooFewCorrespondences {
            got: c.len(),
            need: cfg.consensus_k,
        });
    }
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
    let candidates: Vec<usize> = (0..c.len()).filter(|&i| i != seed).collect();
    Ok(select_members(seed, candidates, c, src, tgt, cfg))
}

/// Ranking key of a candidate: two ascending floats plus the pair identity.
pub(crate) type MemberKey = (f64, f64, (usize, usize));

fn member_key(
    space: ConsensusSpace,
    seed: usize,
    candidate: usize,
    c: &CorrespondenceSet,
    src: &PointCloud,
    tgt: &PointCloud,
    sigma: f64,
) -> MemberKey {
    let pairs = c.pairs();
    let s = &pairs[seed];
    let b = &pairs[candidate];
    let identity = (b.source_index, b.target_index);
    let dist2 = (src.point(b.source_index) - src.point(s.source_index)).norm_squared();
    match space {
        ConsensusSpace::SeedConsistency => {
            // Ranking uses a sharper kernel than seeding; members must be
            // tightly consistent with the seed, not merely tolerable.
            let consistency = pair_consistency(
                src.point(s.source_index),
                tgt.point(s.target_index),
                src.point(b.source_index),
                tgt.point(b.target_index),
                sigma * 0.5,
            );
            (-consistency, dist2, identity)
        }
        ConsensusSpace::SourceSpatial => (dist2, -b.confidence, identity),
        ConsensusSpace::Confidence => ((b.confidence - s.confidence).abs(), 0.0, identity),
    }
}

/// Picks the `consensus_k - 1` best candidates under the configured key and
/// prepends the seed. `candidates` must contain the true best (a superset is
/// fine); the key is a total order, so the result is unique.
fn select_members(
    seed: usize,
    candidates: Vec<usize>,
    c: &CorrespondenceSet,
    src: &PointCloud,
    tgt: &PointCloud,
    cfg: &EstimatorConfig,
) -> ConsensusSet {
    let mut keyed: Vec<(MemberKey, usize)> = candidates
        .into_iter()
        .map(|i| {
            (
                member_key(cfg.consensus_space, seed, i, c, src, tgt, cfg.tau_a),
                i,
            )
        })
        .collect();
    let compare = |a: &(MemberKey, usize), b: &(MemberKey, usize)| {
        a.0 .0
            .total_cmp(&b.0 .0)
            .then(a.0 .1.total_cmp(&b.0 .1))
            .then(a.0 .2.cmp(&b.0 .2))
    };

    let take = cfg.consensus_k - 1;
    // Partial selection first; only the kept prefix needs sorting.
    if keyed.len() > take {
        keyed.select_nth_unstable_by(take - 1, compare);
        keyed.truncate(take);
    }
    keyed.sort_by(compare);

    let mut members = Vec::with_capacity(cfg.consensus_k);
    members.push(seed);
    members.extend(keyed.into_iter().map(|(_, i)| i));
    ConsensusSet { seed, members }
}

/// Uniform grid over the source points of a correspondence set; serves exact
/// nearest-neighbor candidate sets without scanning everything.
pub(crate) struct SourceGrid {
    points: Vec<Vector3<f64>>,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
    cell: f64,
    span: i64,
}

impl SourceGrid {
    pub(crate) fn build(c: &CorrespondenceSet, src: &PointCloud) -> Self {
        let points: Vec<Vector3<f64>> = c
            .pairs()
            .iter()
            .map(|p| *src.point(p.source_index))
            .collect();
        let mut lo = points[0];
        let mut hi = points[0];
        for p in &points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let ext = hi - lo;
        // Aim for a handful of points per cell; degenerate extents fall back
        // to a single slab in that axis.
        let volume = ext.x.max(1e-9) * ext.y.max(1e-9) * ext.z.max(1e-9);
        let cell = (volume * 4.0 / points.len() as f64).cbrt().max(1e-9);
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i as u32);
        }
        let span = (ext.norm() / cell).ceil() as i64 + 2;
        Self {
            points,
            cells,
            cell,
            span,
        }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Candidate indices guaranteed to contain the `m` nearest neighbors of
    /// `center` (excluding `center` itself). Shells are expanded until the
    /// m-th candidate distance is certainly covered.
    pub(crate) fn knn_candidates(&self, center: usize, m: usize) -> Vec<usize> {
        let p = self.points[center];
        let (cx, cy, cz) = Self::key(&p, self.cell);
        let mut candidates: Vec<(f64, usize)> = Vec::new();
        for r in 0..=self.span {
            // cells whose Chebyshev distance from the center cell is exactly r
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        if let Some(cell) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                            for &j in cell {
                                let j = j as usize;
                                if j != center {
                                    candidates.push(((self.points[j] - p).norm_squared(), j));
                                }
                            }
                        }
                    }
                }
            }
            if candidates.len() >= m {
                let covered = r as f64 * self.cell;
                candidates.select_nth_unstable_by(m - 1, |a, b| a.0.total_cmp(&b.0));
                let mth_dist = candidates[m - 1].0.sqrt();
                if mth_dist <= covered {
                    break;
                }
            }
        }
        candidates.into_iter().map(|(_, j)| j).collect()
    }
}

/// Packed-row variant of [`build_consensus`] for the seed-consistency space:
/// one flat pass over precomputed endpoint rows, reusing a scratch buffer.
/// Produces exactly the members the generic path would.
pub(crate) fn build_consensus_consistency_fast(
    seed: usize,
    rows: &[PairRow],
    c: &CorrespondenceSet,
    cfg: &EstimatorConfig,
    scratch: &mut Vec<(MemberKey, usize)>,
) -> Result<ConsensusSet, EstimatorError> {
    debug_assert!(matches!(
        cfg.consensus_space,
        ConsensusSpace::SeedConsistency
    ));
    if c.len() < cfg.consensus_k {
        return Err(EstimatorError::TooFewCorrespondences {
            got: c.len(),
            need: cfg.consensus_k,
        });
    }
    let half_sigma = 0.5 * cfg.tau_a;
    let sigma2 = half_sigma * half_sigma;
    let seed_row = rows[seed];
    let pairs = c.pairs();

    scratch.clear();
    scratch.reserve(rows.len().saturating_sub(1));
    for (i, row) in rows.iter().enumerate() {
        if i == seed {
            continue;
        }
        let cons = consistency(&seed_row, row, sigma2);
        let dx = row[0] - seed_row[0];
        let dy = row[1] - seed_row[1];
        let dz = row[2] - seed_row[2];
        let dist2 = dx * dx + dy * dy + dz * dz;
        let identity = (pairs[i].source_index, pairs[i].target_index);
        scratch.push(((-cons, dist2, identity), i));
    }

    let compare = |a: &(MemberKey, usize), b: &(MemberKey, usize)| {
        a.0 .0
            .total_cmp(&b.0 .0)
            .then(a.0 .1.total_cmp(&b.0 .1))
            .then(a.0 .2.cmp(&b.0 .2))
    };
    let take = cfg.consensus_k - 1;
    if scratch.len() > take {
        scratch.select_nth_unstable_by(take - 1, compare);
        scratch.truncate(take);
    }
    scratch.sort_by(compare);

    let mut members = Vec::with_capacity(cfg.consensus_k);
    members.push(seed);
    members.extend(scratch.iter().map(|&(_, i)| i));
    Ok(ConsensusSet { seed, members })
}

/// Grid-accelerated variant of [`build_consensus`]; same selection, fewer
/// candidate scans. Only valid for the source-spatial consensus space.
pub(crate) fn build_consensus_with_grid(
    seed: usize,
    c: &CorrespondenceSet,
    src: &PointCloud,
    tgt: &PointCloud,
    cfg: &EstimatorConfig,
    grid: &SourceGrid,
) -> Result<ConsensusSet, EstimatorError> {
    debug_assert!(matches!(cfg.consensus_space, ConsensusSpace::SourceSpatial));
    if c.len() < cfg.consensus_k {
        return Err(EstimatorError::TooFewCorrespondences {
            got: c.len(),
            need: cfg.consensus_k,
        });
    }
    let candidates = grid.knn_candidates(seed, cfg.consensus_k - 1);
    Ok(select_members(seed, candidates, c, src, tgt, cfg))
}

/// Symmetric compatibility matrix over a consensus set, entries in [0, 1].
/// The diagonal carries each member's own similarity score.
#[derive(Debug, Clone, PartialEq)]
pub struct CompatibilityMatrix {
    values: DMatrix<f64>,
}

impl CompatibilityMatrix {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Per-member feature-similarity score (the diagonal).
    pub fn score(&self, member: usize) -> f64 {
        self.values[(member, member)]
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }
}

/// Feature-similarity compatibility of a consensus set.
///
/// Each member's intra-difference is the descriptor distance between its two
/// endpoints; differences are normalized as `1 - d / max(d)` and sharpened
/// with `sigmoid((x - mean(x)) * sigma_s)`. The matrix entry for two members
/// is the minimum of their scores. When every raw difference is zero the
/// normalization is undefined and all scores collapse to 0.5.
pub fn feature_compatibility(
    cs: &ConsensusSet,
    c: &CorrespondenceSet,
    src: &PointCloud,
    tgt: &PointCloud,
    cfg: &EstimatorConfig,
) -> Result<CompatibilityMatrix, EstimatorError> {
    cfg.validate()?;
    let (src_desc, tgt_desc) = match (src.descriptors(), tgt.descriptors()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(EstimatorError::MissingDescriptors),
    };

    let k = cs.len();
    let mut raw = Vec::with_capacity(k);
    for &m in cs.members() {
        let pair = &c.pairs()[m];
        let d = (src_desc.row(pair.source_index) - tgt_desc.row(pair.target_index)).norm();
        raw.push(d);
    }

    let max = raw.iter().cloned().fold(0.0_f64, f64::max);
    let scores: Vec<f64> = if max == 0.0 {
        vec![0.5; k]
    } else {
        let normalized: Vec<f64> = raw.iter().map(|d| 1.0 - d / max).collect();
        let mean = normalized.iter().sum::<f64>() / k as f64;
        normalized
            .iter()
            .map(|x| sigmoid((x - mean) * cfg.sigma_s))
            .collect()
    };

    let values = DMatrix::from_fn(k, k, |a, b| scores[a].min(scores[b]));
    Ok(CompatibilityMatrix { values })
}
