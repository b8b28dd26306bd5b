//! Synthetic scenes with exact ground truth: controllable overlap, noise,
//! descriptor quality and outlier content, so matching and estimation claims
//! are testable without trained networks or benchmark data.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    apply_transform, Correspondence, CorrespondenceSet, GeometryError, PointCloud, RigidTransform,
};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("spec field {field} = {value} is out of range")]
    InvalidSpec { field: &'static str, value: f64 },
    #[error("overlap request is infeasible: {overlap} of {points} points rounds to zero")]
    InfeasibleOverlap { overlap: f64, points: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Recipe for one synthetic registration pair.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Points per view.
    pub point_count: usize,
    /// Fraction of each view with counterparts in the other, in (0, 1].
    pub overlap_fraction: f64,
    /// Per-point positional noise (meters); clamped to 1.5 sigma per point.
    pub noise_sigma: f64,
    /// Upper bound on the sampled rotation angle (degrees).
    pub rotation_magnitude: f64,
    /// Descriptor width.
    pub descriptor_dim: usize,
    /// Descriptor perturbation magnitude; 0 gives perfect descriptors.
    pub descriptor_noise: f64,
    /// Fraction of stray points appended to each view, in [0, 1).
    pub outlier_fraction: f64,
    /// Root seed; every output is a pure function of it.
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        // The default point count keeps the superpoint count (0.1 voxels on a
        // unit-scale surface) low enough that dual-softmax rows can clear the
        // 0.05 threshold; a softmax over similarities bounded in (0, 1] never
        // reaches 0.05 once a row has more than ~46 entries.
        Self {
            point_count: 40,
            overlap_fraction: 1.0,
            noise_sigma: 0.0,
            rotation_magnitude: 180.0,
            descriptor_dim: 32,
            descriptor_noise: 0.0,
            outlier_fraction: 0.0,
            rng_seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.point_count == 0 {
            return Err(SynthError::InvalidSpec {
                field: "point_count",
                value: 0.0,
            });
        }
        if !(self.overlap_fraction > 0.0 && self.overlap_fraction <= 1.0) {
            return Err(SynthError::InvalidSpec {
                field: "overlap_fraction",
                value: self.overlap_fraction,
            });
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(SynthError::InvalidSpec {
                field: "noise_sigma",
                value: self.noise_sigma,
            });
        }
        if !(self.rotation_magnitude >= 0.0 && self.rotation_magnitude <= 180.0) {
            return Err(SynthError::InvalidSpec {
                field: "rotation_magnitude",
                value: self.rotation_magnitude,
            });
        }
        if self.descriptor_dim == 0 {
            return Err(SynthError::InvalidSpec {
                field: "descriptor_dim",
                value: 0.0,
            });
        }
        if !(self.descriptor_noise >= 0.0) || !self.descriptor_noise.is_finite() {
            return Err(SynthError::InvalidSpec {
                field: "descriptor_noise",
                value: self.descriptor_noise,
            });
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(SynthError::InvalidSpec {
                field: "outlier_fraction",
                value: self.outlier_fraction,
            });
        }
        Ok(())
    }
}

/// Everything the generator knows about a pair: the true transform, the true
/// dense correspondences, and per-point overlap labels for both views.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub transform: RigidTransform,
    pub true_correspondences: CorrespondenceSet,
    pub src_overlap: Vec<bool>,
    pub tgt_overlap: Vec<bool>,
}

/// Samples a synthetic pair: a base surface (box walls plus a sphere) is
/// cropped into two views sharing `overlap_fraction` of their points, the
/// target view is moved by a random rigid transform, and truncated Gaussian
/// noise plus stray outlier points are added per the spec.
pub fn generate_pair(
    spec: &SceneSpec,
) -> Result<(PointCloud, PointCloud, GroundTruth), SynthError> {
    spec.validate()?;
    let n = spec.point_count;
    let shared = (spec.overlap_fraction * n as f64).round() as usize;
    if shared == 0 {
        return Err(SynthError::InfeasibleOverlap {
            overlap: spec.overlap_fraction,
            points: n,
        });
    }
    let total = 2 * n - shared;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    // Base surface points, sorted along x so index windows become crops.
    let mut base = sample_surface(&mut rng, total);
    base.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));

    // Source view: first n points; target view: last n points. The middle
    // `shared` indices appear in both.
    let tgt_start = n - shared;
    let src_world: Vec<Vector3<f64>> = base[..n].to_vec();
    let tgt_world: Vec<Vector3<f64>> = base[tgt_start..].to_vec();

    let transform = random_transform(&mut rng, spec.rotation_magnitude);

    let src_noise = noise_vectors(&mut rng, n, spec.noise_sigma);
    let tgt_noise = noise_vectors(&mut rng, n, spec.noise_sigma);

    let mut src_points: Vec<Vector3<f64>> = src_world
        .iter()
        .zip(&src_noise)
        .map(|(p, e)| p + e)
        .collect();
    let mut tgt_points: Vec<Vector3<f64>> = tgt_world
        .iter()
        .zip(&tgt_noise)
        .map(|(p, e)| transform.apply(p) + transform.rotation() * e)
        .collect();

    // Stray points with no counterpart, appended to each view.
    let stray = (spec.outlier_fraction * n as f64).round() as usize;
    for _ in 0..stray {
        src_points.push(random_box_point(&mut rng));
    }
    for _ in 0..stray {
        tgt_points.push(transform.apply(&random_box_point(&mut rng)));
    }

    let pairs: Vec<Correspondence> = (0..shared)
        .map(|k| Correspondence {
            source_index: tgt_start + k,
            target_index: k,
            confidence: 1.0,
        })
        .collect();
    let src_len = src_points.len();
    let tgt_len = tgt_points.len();
    let true_correspondences = CorrespondenceSet::new(pairs, src_len, tgt_len)?;

    let mut src_overlap = vec![false; src_len];
    let mut tgt_overlap = vec![false; tgt_len];
    for c in true_correspondences.pairs() {
        src_overlap[c.source_index] = true;
        tgt_overlap[c.target_index] = true;
    }

    let src = PointCloud::new(src_points)?;
    let tgt = PointCloud::new(tgt_points)?;
    Ok((
        src,
        tgt,
        GroundTruth {
            transform,
            true_correspondences,
            src_overlap,
            tgt_overlap,
        },
    ))
}

/// Unit-scale composite surface: five box walls and a half-embedded sphere.
fn sample_surface(rng: &mut impl Rng, count: usize) -> Vec<Vector3<f64>> {
    (0..count)
        .map(|_| {
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            match rng.random_range(0..6u8) {
                // floor and two pairs of walls of the unit box
                0 => Vector3::new(u, v, 0.0),
                1 => Vector3::new(u, 0.0, v * 0.6),
                2 => Vector3::new(u, 1.0, v * 0.6),
                3 => Vector3::new(0.0, u, v * 0.6),
                4 => Vector3::new(1.0, u, v * 0.6),
                // sphere cap sitting on the floor
                _ => {
                    let theta = u * std::f64::consts::TAU;
                    let phi = (1.0 - 2.0 * v).acos() / 2.0;
                    let r = 0.25;
                    Vector3::new(
                        0.5 + r * phi.sin() * theta.cos(),
                        0.5 + r * phi.sin() * theta.sin(),
                        r * phi.cos(),
                    )
                }
            }
        })
        .collect()
}

fn random_box_point(rng: &mut impl Rng) -> Vector3<f64> {
    Vector3::new(rng.random(), rng.random(), rng.random::<f64>() * 0.6)
}

fn random_transform(rng: &mut impl Rng, magnitude_deg: f64) -> RigidTransform {
    let axis = loop {
        let v = Vector3::new(
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        );
        if v.norm_squared() > 1e-6 {
            break v.normalize();
        }
    };
    let angle = rng.random::<f64>() * magnitude_deg.to_radians();
    let rotation =
        nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
            .into_inner();
    let translation = Vector3::new(
        rng.random::<f64>() * 2.0 - 1.0,
        rng.random::<f64>() * 2.0 - 1.0,
        rng.random::<f64>() * 2.0 - 1.0,
    );
    RigidTransform::try_new(rotation, translation).expect("axis-angle rotation is in SO(3)")
}

/// Gaussian noise with the vector norm clamped to 1.5 sigma, which keeps
/// every true-correspondence residual within 3 sigma of zero.
fn noise_vectors(rng: &mut impl Rng, count: usize, sigma: f64) -> Vec<Vector3<f64>> {
    (0..count)
        .map(|_| {
            if sigma == 0.0 {
                return Vector3::zeros();
            }
            let gx: f64 = StandardNormal.sample(rng);
            let gy: f64 = StandardNormal.sample(rng);
            let gz: f64 = StandardNormal.sample(rng);
            let mut v = Vector3::new(gx, gy, gz) * sigma;
            let cap = 1.5 * sigma;
            let norm = v.norm();
            if norm > cap {
                v *= cap / norm;
            }
            v
        })
        .collect()
}

/// Smooth random descriptor field over space: each channel is a cosine of a
/// seeded random frequency and phase. Nearby positions get similar vectors,
/// the way pooled multi-resolution backbone features behave.
struct DescriptorField {
    frequencies: DMatrix<f64>,
    phases: DVector<f64>,
}

impl DescriptorField {
    /// Correlation length of the field (meters, scene is unit scale). Kept
    /// close to the scene extent: much shorter scales make the quasi-periodic
    /// field repeat within one scene, which manufactures mutually consistent
    /// alias matches (structured outliers) rather than scattered ones.
    const LENGTH_SCALE: f64 = 0.7;

    fn seeded(rng: &mut impl Rng, dim: usize) -> Self {
        let omega = std::f64::consts::TAU / Self::LENGTH_SCALE;
        let frequencies = DMatrix::from_fn(dim, 3, |_, _| {
            let g: f64 = StandardNormal.sample(rng);
            g * omega
        });
        let phases = DVector::from_fn(dim, |_, _| rng.random::<f64>() * std::f64::consts::TAU);
        Self {
            frequencies,
            phases,
        }
    }

    fn sample(&self, p: &Vector3<f64>) -> nalgebra::DVector<f64> {
        let mut v = &self.frequencies * p + &self.phases;
        v.apply(|x| *x = x.cos());
        let norm = v.norm();
        if norm > 1e-9 {
            v / norm
        } else {
            v
        }
    }
}

/// Attaches simulated descriptors to both clouds.
///
/// Each true correspondence shares a random unit vector (a smooth field of
/// the shared point position, so nearby pairs get similar vectors), perturbed
/// per side by `descriptor_noise` times a random unit vector and
/// renormalized; points without counterparts get independent unit vectors.
/// The achieved inlier ratio of mutual-nearest matching decreases
/// monotonically in the noise.
pub fn simulate_descriptors(
    src: &mut PointCloud,
    tgt: &mut PointCloud,
    truth: &GroundTruth,
    spec: &SceneSpec,
) -> Result<(), SynthError> {
    spec.validate()?;
    let d = spec.descriptor_dim;
    // Separate stream so descriptor draws do not disturb scene geometry.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    rng.set_stream(1);

    let field = DescriptorField::seeded(&mut rng, d);
    let mut src_desc = DMatrix::zeros(src.len(), d);
    let mut tgt_desc = DMatrix::zeros(tgt.len(), d);
    let mut src_done = vec![false; src.len()];
    let mut tgt_done = vec![false; tgt.len()];

    for c in truth.true_correspondences.pairs() {
        let shared = field.sample(src.point(c.source_index));
        let a = perturb_unit(&mut rng, &shared, spec.descriptor_noise);
        let b = perturb_unit(&mut rng, &shared, spec.descriptor_noise);
        src_desc.row_mut(c.source_index).copy_from(&a.transpose());
        tgt_desc.row_mut(c.target_index).copy_from(&b.transpose());
        src_done[c.source_index] = true;
        tgt_done[c.target_index] = true;
    }
    for i in 0..src.len() {
        if !src_done[i] {
            let v = random_unit(&mut rng, d);
            src_desc.row_mut(i).copy_from(&v.transpose());
        }
    }
    for j in 0..tgt.len() {
        if !tgt_done[j] {
            let v = random_unit(&mut rng, d);
            tgt_desc.row_mut(j).copy_from(&v.transpose());
        }
    }

    src.set_descriptors(src_desc)?;
    tgt.set_descriptors(tgt_desc)?;
    Ok(())
}

fn random_unit(rng: &mut impl Rng, d: usize) -> nalgebra::DVector<f64> {
    loop {
        let v = nalgebra::DVector::from_fn(d, |_, _| {
            let x: f64 = StandardNormal.sample(rng);
            x
        });
        let norm = v.norm();
        if norm > 1e-9 {
            return v / norm;
        }
    }
}

fn perturb_unit(
    rng: &mut impl Rng,
    base: &nalgebra::DVector<f64>,
    noise: f64,
) -> nalgebra::DVector<f64> {
    if noise == 0.0 {
        return base.clone();
    }
    let direction = random_unit(rng, base.len());
    let v = base + &direction * noise;
    let norm = v.norm();
    if norm > 1e-9 {
        v / norm
    } else {
        // noise vector exactly cancelled the base; fall back to the noise
        // direction itself
        direction
    }
}

/// Ground-truth overlap labels: a point is labeled iff it has a counterpart
/// within `tau` on the other side under `t`.
pub fn overlap_oracle(
    src: &PointCloud,
    tgt: &PointCloud,
    t: &RigidTransform,
    tau: f64,
) -> (Vec<bool>, Vec<bool>) {
    let moved = apply_transform(t, src);
    let mut src_labels = vec![false; src.len()];
    let mut tgt_labels = vec![false; tgt.len()];
    let tau2 = tau * tau;
    for (i, p) in moved.points().iter().enumerate() {
        for (j, q) in tgt.points().iter().enumerate() {
            if (p - q).norm_squared() < tau2 {
                src_labels[i] = true;
                tgt_labels[j] = true;
            }
        }
    }
    (src_labels, tgt_labels)
}

/// Voxel-grid downsampling: one superpoint per occupied voxel at the centroid
/// of its members. Voxels are emitted in ascending grid order, so the output
/// is deterministic.
///
/// Descriptors, when present, are pooled over a ball of radius `1.5 * voxel`
/// around each centroid (normalized mean). Ball pooling rather than cell
/// pooling keeps the pooled features stable across the two views, whose
/// voxel grids sit in different frames.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud, SynthError> {
    if !(voxel > 0.0) || !voxel.is_finite() {
        return Err(SynthError::InvalidSpec {
            field: "voxel",
            value: voxel,
        });
    }
    use std::collections::BTreeMap;
    let mut cells: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.points().iter().enumerate() {
        let key = (
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        );
        cells.entry(key).or_default().push(i);
    }

    let mut points = Vec::with_capacity(cells.len());
    for members in cells.values() {
        let mut centroid = Vector3::zeros();
        for &i in members {
            centroid += cloud.point(i);
        }
        points.push(centroid / members.len() as f64);
    }

    let Some(desc) = cloud.descriptors() else {
        return Ok(PointCloud::new(points)?);
    };

    let pool_radius2 = (1.5 * voxel) * (1.5 * voxel);
    let mut pooled = DMatrix::zeros(points.len(), desc.ncols());
    for (row, anchor) in points.iter().enumerate() {
        let mut mean = nalgebra::DVector::zeros(desc.ncols());
        let mut count = 0usize;
        for (i, p) in cloud.points().iter().enumerate() {
            if (p - anchor).norm_squared() <= pool_radius2 {
                mean += desc.row(i).transpose();
                count += 1;
            }
        }
        // every centroid has at least its own cell members in range
        mean /= count as f64;
        let norm = mean.norm();
        if norm > 1e-12 {
            mean /= norm;
        }
        pooled.row_mut(row).copy_from(&mean.transpose());
    }
    Ok(PointCloud::with_descriptors(points, pooled)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn full_overlap_no_noise_is_exactly_transform_related() {
        let spec = SceneSpec {
            point_count: 200,
            overlap_fraction: 1.0,
            rng_seed: 5,
            ..SceneSpec::default()
        };
        let (src, tgt, truth) = generate_pair(&spec).unwrap();
        assert_eq!(truth.true_correspondences.len(), 200);
        let moved = apply_transform(&truth.transform, &src);
        for c in truth.true_correspondences.pairs() {
            assert_eq!(moved.point(c.source_index), tgt.point(c.target_index));
        }
        assert!(truth.src_overlap.iter().all(|&b| b));
    }

    #[test]
    fn measured_overlap_tracks_requested_fraction() {
        let spec = SceneSpec {
            point_count: 1500,
            overlap_fraction: 0.3,
            noise_sigma: 0.005,
            rng_seed: 6,
            ..SceneSpec::default()
        };
        let (src, tgt, truth) = generate_pair(&spec).unwrap();

        // measurement oracle: fraction of source points with a counterpart
        // within 3 sigma (+ slack) of the transformed position
        let tau = 3.0 * spec.noise_sigma + 1e-9;
        let (labels, _) = overlap_oracle(&src, &tgt, &truth.transform, tau);
        let measured = labels.iter().filter(|&&b| b).count() as f64 / src.len() as f64;
        assert!(
            (measured - 0.3).abs() <= 0.05,
            "measured overlap {measured}"
        );
    }

    #[test]
    fn identical_seeds_are_bit_identical() {
        let spec = SceneSpec {
            point_count: 300,
            overlap_fraction: 0.5,
            noise_sigma: 0.01,
            descriptor_noise: 0.3,
            outlier_fraction: 0.1,
            rng_seed: 77,
            ..SceneSpec::default()
        };
        let (mut a_src, mut a_tgt, a_truth) = generate_pair(&spec).unwrap();
        let (mut b_src, mut b_tgt, b_truth) = generate_pair(&spec).unwrap();
        simulate_descriptors(&mut a_src, &mut a_tgt, &a_truth, &spec).unwrap();
        simulate_descriptors(&mut b_src, &mut b_tgt, &b_truth, &spec).unwrap();
        assert_eq!(a_src, b_src);
        assert_eq!(a_tgt, b_tgt);
        assert_eq!(a_truth, b_truth);
    }

    #[test]
    fn noiseless_residuals_are_zero_and_bounded_by_noise() {
        let clean = SceneSpec {
            point_count: 150,
            overlap_fraction: 0.6,
            rng_seed: 8,
            ..SceneSpec::default()
        };
        let (src, tgt, truth) = generate_pair(&clean).unwrap();
        let moved = apply_transform(&truth.transform, &src);
        for c in truth.true_correspondences.pairs() {
            let r = (moved.point(c.source_index) - tgt.point(c.target_index)).norm();
            assert_eq!(r, 0.0);
        }

        let noisy = SceneSpec {
            noise_sigma: 0.02,
            ..clean
        };
        let (src, tgt, truth) = generate_pair(&noisy).unwrap();
        let moved = apply_transform(&truth.transform, &src);
        for c in truth.true_correspondences.pairs() {
            let r = (moved.point(c.source_index) - tgt.point(c.target_index)).norm();
            assert!(r <= 3.0 * noisy.noise_sigma);
        }
    }

    fn mutual_nearest_inlier_ratio(src: &PointCloud, tgt: &PointCloud, truth: &GroundTruth) -> f64 {
        let sd = src.descriptors().unwrap();
        let td = tgt.descriptors().unwrap();
        let nearest = |row: nalgebra::RowDVector<f64>, m: &DMatrix<f64>| -> usize {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..m.nrows() {
                let d = (m.row(j) - &row).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        };
        let truth_pairs: std::collections::HashSet<(usize, usize)> = truth
            .true_correspondences
            .pairs()
            .iter()
            .map(|c| (c.source_index, c.target_index))
            .collect();
        let mut hits = 0usize;
        let mut total = 0usize;
        // IR restricted to the overlap: only sources with a true counterpart
        for i in (0..src.len()).filter(|&i| truth.src_overlap[i]) {
            let j = nearest(sd.row(i).into_owned(), td);
            let back = nearest(td.row(j).into_owned(), sd);
            if back == i {
                total += 1;
                if truth_pairs.contains(&(i, j)) {
                    hits += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }

    #[test]
    fn perfect_descriptors_give_full_inlier_ratio() {
        let spec = SceneSpec {
            point_count: 120,
            overlap_fraction: 0.5,
            descriptor_dim: 16,
            rng_seed: 9,
            ..SceneSpec::default()
        };
        let (mut src, mut tgt, truth) = generate_pair(&spec).unwrap();
        simulate_descriptors(&mut src, &mut tgt, &truth, &spec).unwrap();
        let ir = mutual_nearest_inlier_ratio(&src, &tgt, &truth);
        assert_relative_eq!(ir, 1.0);
    }

    #[test]
    fn inlier_ratio_decreases_with_descriptor_noise() {
        let mut means = Vec::new();
        for noise in [0.0, 0.2, 0.5, 1.0] {
            let mut total = 0.0;
            for seed in 0..20 {
                let spec = SceneSpec {
                    point_count: 80,
                    overlap_fraction: 0.5,
                    descriptor_dim: 16,
                    descriptor_noise: noise,
                    rng_seed: 100 + seed,
                    ..SceneSpec::default()
                };
                let (mut src, mut tgt, truth) = generate_pair(&spec).unwrap();
                simulate_descriptors(&mut src, &mut tgt, &truth, &spec).unwrap();
                total += mutual_nearest_inlier_ratio(&src, &tgt, &truth);
            }
            means.push(total / 20.0);
        }
        for w in means.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "means not decreasing: {means:?}");
        }
    }

    #[test]
    fn huge_descriptor_noise_is_no_better_than_random() {
        let mut noisy_total = 0.0;
        let mut random_total = 0.0;
        for seed in 0..20 {
            let spec = SceneSpec {
                point_count: 80,
                overlap_fraction: 1.0,
                descriptor_dim: 16,
                descriptor_noise: 2.5,
                rng_seed: 200 + seed,
                ..SceneSpec::default()
            };
            let (mut src, mut tgt, truth) = generate_pair(&spec).unwrap();
            simulate_descriptors(&mut src, &mut tgt, &truth, &spec).unwrap();
            noisy_total += mutual_nearest_inlier_ratio(&src, &tgt, &truth);

            // random baseline: same scene, freshly seeded unrelated descriptors
            let mut rng = ChaCha8Rng::seed_from_u64(999 + seed);
            let mut rand_desc = |n: usize| {
                DMatrix::from_fn(n, 16, |_, _| {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    x
                })
            };
            let src_r = PointCloud::with_descriptors(src.points().to_vec(), rand_desc(src.len()))
                .unwrap();
            let tgt_r = PointCloud::with_descriptors(tgt.points().to_vec(), rand_desc(tgt.len()))
                .unwrap();
            random_total += mutual_nearest_inlier_ratio(&src_r, &tgt_r, &truth);
        }
        let noisy_mean = noisy_total / 20.0;
        let random_mean = random_total / 20.0;
        assert!(
            (noisy_mean - random_mean).abs() < 0.05,
            "noisy {noisy_mean} vs random {random_mean}"
        );
    }

    #[test]
    fn overlap_oracle_extremes_and_brute_force() {
        let spec = SceneSpec {
            point_count: 100,
            rng_seed: 11,
            ..SceneSpec::default()
        };
        let (src, _, _) = generate_pair(&spec).unwrap();

        let (a, b) = overlap_oracle(&src, &src, &RigidTransform::identity(), 0.01);
        assert!(a.iter().all(|&x| x) && b.iter().all(|&x| x));

        let far = apply_transform(
            &RigidTransform::try_new(
                nalgebra::Matrix3::identity(),
                Vector3::new(100.0, 0.0, 0.0),
            )
            .unwrap(),
            &src,
        );
        let (a, b) = overlap_oracle(&src, &far, &RigidTransform::identity(), 0.5);
        assert!(a.iter().all(|&x| !x) && b.iter().all(|&x| !x));
    }

    #[test]
    fn overlap_oracle_is_symmetric_under_inversion() {
        let spec = SceneSpec {
            point_count: 120,
            overlap_fraction: 0.4,
            noise_sigma: 0.01,
            rng_seed: 12,
            ..SceneSpec::default()
        };
        let (src, tgt, truth) = generate_pair(&spec).unwrap();
        let tau = 0.05;
        let (src_labels, tgt_labels) = overlap_oracle(&src, &tgt, &truth.transform, tau);
        let (tgt_swapped, src_swapped) =
            overlap_oracle(&tgt, &src, &truth.transform.invert(), tau);
        assert_eq!(src_labels, src_swapped);
        assert_eq!(tgt_labels, tgt_swapped);
    }

    #[test]
    fn voxel_downsample_merges_and_pools() {
        let pts = vec![
            Vector3::new(0.01, 0.01, 0.0),
            Vector3::new(0.02, 0.03, 0.0),
            Vector3::new(0.95, 0.95, 0.0),
        ];
        let desc = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let cloud = PointCloud::with_descriptors(pts, desc).unwrap();
        let down = voxel_downsample(&cloud, 0.1).unwrap();
        assert_eq!(down.len(), 2);
        assert_relative_eq!(down.point(0), &Vector3::new(0.015, 0.02, 0.0), epsilon = 1e-12);
        assert_relative_eq!(down.descriptors().unwrap()[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(down.descriptors().unwrap()[(1, 1)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SceneSpec::default();
        spec.overlap_fraction = 0.0;
        assert!(matches!(
            generate_pair(&spec).unwrap_err(),
            SynthError::InvalidSpec { .. }
        ));

        let tiny = SceneSpec {
            point_count: 100,
            overlap_fraction: 1e-9,
            ..SceneSpec::default()
        };
        assert_eq!(
            generate_pair(&tiny).unwrap_err(),
            SynthError::InfeasibleOverlap {
                overlap: 1e-9,
                points: 100
            }
        );
    }
}
