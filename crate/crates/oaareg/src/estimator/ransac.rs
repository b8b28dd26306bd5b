//! RANSAC baseline: 3-point minimal samples, inlier counting under the
//! acceptance radius, final refit on the winning consensus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    count_supporters, matched_points, refit_on_supporters, weighted_svd, EstimatorConfig,
    EstimatorError,
};
use crate::geometry::{CorrespondenceSet, PointCloud, RigidTransform};

const BATCH: usize = 1024;

#[derive(Clone, Copy)]
struct BestModel {
    count: usize,
    batch: usize,
    iter: usize,
    transform: RigidTransform,
}

/// Classic RANSAC over 3-point samples.
///
/// Iterations run in fixed-size batches, each with its own random stream
/// derived from the root seed, so the result is identical for a given seed
/// no matter how the batches are scheduled. Ties on the inlier count resolve
/// toward the earliest iteration.
pub fn ransac_estimate(
    c: &CorrespondenceSet,
    src: &PointCloud,
    tgt: &PointCloud,
    cfg: &EstimatorConfig,
) -> Result<RigidTransform, EstimatorError> {
    cfg.validate()?;
    if c.len() < 3 {
        return Err(EstimatorError::TooFewCorrespondences {
            got: c.len(),
            need: 3,
        });
    }
    let canonical = c.canonicalized();
    let pairs = matched_points(&canonical, src, tgt)?;
    let n = pairs.len();

    let batches = cfg.ransac_iters.div_ceil(BATCH);
    let best = (0..batches)
        .into_par_iter()
        .filter_map(|batch| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            rng.set_stream(batch as u64 + 1);
            let iterations = BATCH.min(cfg.ransac_iters - batch * BATCH);

            let mut local: Option<BestModel> = None;
            for iter in 0..iterations {
                let (a, b, d) = sample_three(&mut rng, n);
                let sample_src = [pairs[a].0, pairs[b].0, pairs[d].0];
                let sample_tgt = [pairs[a].1, pairs[b].1, pairs[d].1];
                let Ok(model) = weighted_svd(&sample_src, &sample_tgt, &[1.0; 3]) else {
                    continue;
                };
                let count = count_supporters(&model, &pairs, cfg);
                if local.as_ref().is_none_or(|best| count > best.count) {
                    local = Some(BestModel {
                        count,
                        batch,
                        iter,
                        transform: model,
                    });
                }
            }
            local
        })
        .reduce_with(|a, b| {
            // max count; ties prefer the earliest (batch, iter)
            if (b.count, a.batch, a.iter) > (a.count, b.batch, b.iter) {
                b
            } else {
                a
            }
        });

    let best = best.ok_or(EstimatorError::NoValidSample)?;

    // Refit on the winning consensus; falls back to the minimal-sample model
    // when that consensus is too thin or degenerate.
    Ok(refit_on_supporters(best.transform, &pairs, cfg))
}

fn sample_three(rng: &mut impl Rng, n: usize) -> (usize, usize, usize) {
    let a = rng.random_range(0..n);
    let mut b = rng.random_range(0..n);
    while b == a {
        b = rng.random_range(0..n);
    }
    let mut c = rng.random_range(0..n);
    while c == a || c == b {
        c = rng.random_range(0..n);
    }
    (a, b, c)
}
