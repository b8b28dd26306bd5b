//! Spectral reliability scoring and seed selection.
//!
//! Correspondences are scored by their association with the leading
//! eigenvector of a pairwise geometric-consistency matrix; seeds are the
//! score local maxima within the configured radius, capped to the configured
//! fraction.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{EstimatorConfig, EstimatorError};
use crate::geometry::{CorrespondenceSet, PointCloud};

/// Leading-eigenvector weights from power iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct LeadingWeights {
    pub weights: DVector<f64>,
    pub eigenvalue: f64,
    /// Set when the matrix was all-zero and the uniform vector was returned.
    pub degenerate: bool,
}

/// Power iteration from the uniform vector, L2-normalized each step.
///
/// Stops once the iterate moves less than 1e-9 or after `iters` steps. A zero
/// matrix yields uniform weights with the `degenerate` flag set. Entries stay
/// nonnegative because the matrix and the start vector are.
pub fn leading_weights(
    matrix: &DMatrix<f64>,
    iters: usize,
) -> Result<LeadingWeights, EstimatorError> {
    if iters == 0 {
        return Err(EstimatorError::InvalidConfig {
            field: "power_iters",
            value: 0.0,
        });
    }
    let k = matrix.nrows();
    if k == 0 || matrix.ncols() != k {
        return Err(EstimatorError::InvalidMatrix);
    }
    for i in 0..k {
        for j in i..k {
            let v = matrix[(i, j)];
            if !v.is_finite() || v < 0.0 || (matrix[(j, i)] - v).abs() > 1e-9 {
                return Err(EstimatorError::InvalidMatrix);
            }
        }
    }

    let uniform = DVector::from_element(k, 1.0 / (k as f64).sqrt());
    let mut x = uniform.clone();
    let mut eigenvalue = 0.0;
    for _ in 0..iters {
        let y = matrix * &x;
        let norm = y.norm();
        if norm == 0.0 {
            return Ok(LeadingWeights {
                weights: uniform,
                eigenvalue: 0.0,
                degenerate: true,
            });
        }
        let next = y / norm;
        eigenvalue = norm;
        let delta = (&next - &x).norm();
        x = next;
        if delta < 1e-9 {
            break;
        }
    }
    Ok(LeadingWeights {
        weights: x,
        eigenvalue,
        degenerate: false,
    })
}

/// Spectral reliability score per correspondence, aligned with `c.pairs()`.
///
/// The leading eigenvector is solved on at most `spectral_cap` rows (a seeded
/// uniform subsample when the set is larger); every correspondence is then
/// scored against that subsample, weighted by the eigenvector. Scores do not
/// depend on the order of `c.pairs()`.
pub fn spectral_scores(
    c: &CorrespondenceSet,
    src: &PointCloud,
    tgt: &PointCloud,
    cfg: &EstimatorConfig,
) -> Result<Vec<f64>, EstimatorError> {
    cfg.validate()?;
    if c.is_empty() {
        return Err(EstimatorError::EmptyCorrespondences);
    }
    let (order, points) = canonical_points(c, src, tgt)?;
    let canonical_scores = scores_in_canonical_order(&points, cfg);
    let mut scores = vec![0.0; c.len()];
    for (pos, &original) in order.iter().enumerate() {
        scores[original] = canonical_scores[pos];
    }
    Ok(scores)
}

/// Selects seed correspondences.
///
/// A correspondence is a seed iff no correspondence whose source point lies
/// within `seed_radius` scores strictly higher; at most
/// `ceil(seed_fraction * n)` survivors are kept, best scores first. Returned
/// indices point into `c.pairs()`; their content and order are invariant to
/// the input pair order.
pub fn select_seeds(
    c: &CorrespondenceSet,
    src: &PointCloud,
    tgt: &PointCloud,
    cfg: &EstimatorConfig,
) -> Result<Vec<usize>, EstimatorError> {
    cfg.validate()?;
    if c.is_empty() {
        return Err(EstimatorError::EmptyCorrespondences);
    }
    let (order, points) = canonical_points(c, src, tgt)?;
    let scores = scores_in_canonical_order(&points, cfg);

    let sources: Vec<Vector3<f64>> = points.iter().map(|(p, _)| *p).collect();
    let survivors = local_maxima(&sources, &scores, cfg.seed_radius);

    let cap = ((cfg.seed_fraction * c.len() as f64).ceil() as usize).max(1);
    let mut ranked = survivors;
    ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ranked.truncate(cap);

    Ok(ranked.into_iter().map(|pos| order[pos]).collect())
}

/// Canonical (identity-sorted) enumeration of the pairs and their endpoints.
fn canonical_points(
    c: &CorrespondenceSet,
    src: &PointCloud,
    tgt: &PointCloud,
) -> Result<(Vec<usize>, Vec<(Vector3<f64>, Vector3<f64>)>), EstimatorError> {
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
    let mut order: Vec<usize> = (0..c.len()).collect();
    order.sort_by_key(|&i| {
        let p = &c.pairs()[i];
        (p.source_index, p.target_index)
    });
    let points = order
        .iter()
        .map(|&i| {
            let p = &c.pairs()[i];
            (*src.point(p.source_index), *tgt.point(p.target_index))
        })
        .collect();
    Ok((order, points))
}

use super::kernel::{PairColumns, PairRow};

fn pack_rows(points: &[(Vector3<f64>, Vector3<f64>)], take: &[usize]) -> Vec<PairRow> {
    take.iter()
        .map(|&i| {
            let (p, q) = points[i];
            [p.x, p.y, p.z, q.x, q.y, q.z]
        })
        .collect()
}

/// Row-compressed sparse matrix; the consistency kernel zeroes most entries,
/// so the power iteration only touches the survivors.
struct SparseRows {
    offsets: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl SparseRows {
    fn multiply(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut().enumerate().for_each(|(i, out)| {
            let mut acc = 0.0;
            for k in self.offsets[i]..self.offsets[i + 1] {
                acc += self.vals[k] * x[self.cols[k] as usize];
            }
            *out = acc;
        });
    }
}

fn scores_in_canonical_order(
    points: &[(Vector3<f64>, Vector3<f64>)],
    cfg: &EstimatorConfig,
) -> Vec<f64> {
    let n = points.len();
    let sigma = cfg.tau_a;

    let sample: Vec<usize> = if n <= cfg.spectral_cap {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(cfg.spectral_cap);
        idx.sort_unstable();
        idx
    };
    let s = sample.len();

    let sigma2 = sigma * sigma;
    let all: Vec<usize> = (0..n).collect();
    let rows_all = pack_rows(points, &all);
    let rows_sample = pack_rows(points, &sample);
    let cols_sample = PairColumns::from_rows(&rows_sample);

    // Sparse consistency matrix over the sample. The kernel is symmetric, so
    // only the upper triangle is evaluated and then mirrored. Each row is
    // computed branch-free into a scratch buffer and compacted afterwards,
    // which keeps the kernel loop vectorizable.
    let upper: Vec<(Vec<u32>, Vec<f64>)> = (0..s)
        .into_par_iter()
        .map_init(
            || vec![0.0f64; s],
            |scratch, a| {
                let row_a = rows_sample[a];
                let buf = &mut scratch[..s - a];
                cols_sample.consistency_block(&row_a, a, buf, sigma2);
                let mut cols = Vec::with_capacity(32);
                let mut vals = Vec::with_capacity(32);
                for (off, &v) in buf.iter().enumerate() {
                    if v > 0.0 {
                        cols.push((a + off) as u32);
                        vals.push(v);
                    }
                }
                (cols, vals)
            },
        )
        .collect();

    let mut counts = vec![0usize; s];
    for (a, (cs, _)) in upper.iter().enumerate() {
        counts[a] += cs.len();
        for &b in cs {
            if b as usize != a {
                counts[b as usize] += 1;
            }
        }
    }
    let mut offsets = Vec::with_capacity(s + 1);
    offsets.push(0);
    let mut total = 0;
    for c in &counts {
        total += c;
        offsets.push(total);
    }
    let mut cols = vec![0u32; total];
    let mut vals = vec![0.0f64; total];
    let mut cursor = offsets[..s].to_vec();
    for (a, (cs, vs)) in upper.iter().enumerate() {
        for (&b, &v) in cs.iter().zip(vs) {
            let bu = b as usize;
            if bu != a {
                cols[cursor[bu]] = a as u32;
                vals[cursor[bu]] = v;
                cursor[bu] += 1;
            }
        }
        for (&b, &v) in cs.iter().zip(vs) {
            cols[cursor[a]] = b;
            vals[cursor[a]] = v;
            cursor[a] += 1;
        }
    }
    let matrix = SparseRows { offsets, cols, vals };

    // Budgeted power iteration from the uniform vector; scores only need the
    // ranking, so the 1e-9 iterate tolerance usually ends it early.
    let mut x = vec![1.0 / (s as f64).sqrt(); s];
    let mut y = vec![0.0; s];
    for _ in 0..cfg.power_iters {
        matrix.multiply(&x, &mut y);
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            // No consistent pair anywhere; uniform scores.
            break;
        }
        let mut delta = 0.0;
        for (xi, yi) in x.iter_mut().zip(&y) {
            let next = yi / norm;
            delta += (next - *xi) * (next - *xi);
            *xi = next;
        }
        if delta.sqrt() < 1e-9 {
            break;
        }
    }

    // Score every correspondence against the weighted sample. In-sample rows
    // reuse the sparse rows; the rest evaluate the kernel on the fly.
    let in_sample: HashMap<usize, usize> =
        sample.iter().enumerate().map(|(pos, &i)| (i, pos)).collect();
    let weights = &x;
    (0..n)
        .into_par_iter()
        .map(|a| {
            if let Some(&pos) = in_sample.get(&a) {
                let mut acc = 0.0;
                for k in matrix.offsets[pos]..matrix.offsets[pos + 1] {
                    acc += matrix.vals[k] * weights[matrix.cols[k] as usize];
                }
                acc
            } else {
                cols_sample.consistency_dot(&rows_all[a], weights, sigma2)
            }
        })
        .collect()
}

/// Indices whose score is not strictly beaten by any other point within
/// `radius`. Uses a uniform grid so the scan stays near-linear.
fn local_maxima(points: &[Vector3<f64>], scores: &[f64], radius: f64) -> Vec<usize> {
    let key = |p: &Vector3<f64>| -> (i64, i64, i64) {
        (
            (p.x / radius).floor() as i64,
            (p.y / radius).floor() as i64,
            (p.z / radius).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }

    let mut survivors = Vec::new();
    'outer: for (i, p) in points.iter().enumerate() {
        let (cx, cy, cz) = key(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(cell) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &j in cell {
                            if j != i
                                && (points[j] - p).norm() <= radius
                                && scores[j] > scores[i]
                            {
                                continue 'outer;
                            }
                        }
                    }
                }
            }
        }
        survivors.push(i);
    }
    survivors
}
