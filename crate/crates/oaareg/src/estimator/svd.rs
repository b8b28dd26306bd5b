//! Closed-form weighted rigid alignment (weighted Procrustes).

use nalgebra::{Matrix3, Vector3};

use super::EstimatorError;
use crate::geometry::RigidTransform;

/// Weighted SVD alignment of matched 3D points.
///
/// Removes the weighted centroids, decomposes the weighted cross-covariance,
/// corrects reflections through the determinant sign and recovers the
/// translation from the centroids. The rotation is re-projected onto SO(3)
/// by a final polar decomposition so the result always satisfies the
/// [`RigidTransform`] invariants.
///
/// Fails when fewer than three pairs carry positive weight or when the
/// weighted support is (near-)collinear, where the rotation is not unique.
pub fn weighted_svd(
    src: &[Vector3<f64>],
    tgt: &[Vector3<f64>],
    weights: &[f64],
) -> Result<RigidTransform, EstimatorError> {
    if src.len() != tgt.len() || src.len() != weights.len() {
        return Err(EstimatorError::LengthMismatch);
    }
    if !weights.iter().all(|w| w.is_finite() && *w >= 0.0) {
        return Err(EstimatorError::InvalidWeights);
    }
    let positive = weights.iter().filter(|w| **w > 0.0).count();
    if positive < 3 {
        return Err(EstimatorError::TooFewPositiveWeights { got: positive });
    }

    let wsum: f64 = weights.iter().sum();
    let mut centroid_src = Vector3::zeros();
    let mut centroid_tgt = Vector3::zeros();
    for ((p, q), w) in src.iter().zip(tgt).zip(weights) {
        centroid_src += p * *w;
        centroid_tgt += q * *w;
    }
    centroid_src /= wsum;
    centroid_tgt /= wsum;

    let mut cross = Matrix3::zeros();
    for ((p, q), w) in src.iter().zip(tgt).zip(weights) {
        cross += (p - centroid_src) * (q - centroid_tgt).transpose() * *w;
    }

    let svd = cross.svd(true, true);
    let u = svd.u.ok_or(EstimatorError::DegenerateGeometry)?;
    let v = svd.v_t.ok_or(EstimatorError::DegenerateGeometry)?.transpose();

    // Rank < 2 means the weighted support is collinear or coincident.
    let mut sv = [
        svd.singular_values[0],
        svd.singular_values[1],
        svd.singular_values[2],
    ];
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= 0.0 || sv[1] <= sv[0] * 1e-12 {
        return Err(EstimatorError::DegenerateGeometry);
    }

    let mut v = v;
    if (v * u.transpose()).determinant() < 0.0 {
        // Flip the column belonging to the smallest singular value.
        let smallest = (0..3)
            .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
            .unwrap();
        for r in 0..3 {
            v[(r, smallest)] = -v[(r, smallest)];
        }
    }
    let rotation = polar_rotation(v * u.transpose());
    let translation = centroid_tgt - rotation * centroid_src;

    RigidTransform::try_new(rotation, translation).map_err(|_| EstimatorError::DegenerateGeometry)
}

/// Nearest rotation matrix to `m` (polar decomposition via SVD).
fn polar_rotation(m: Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("3x3 svd");
    let v_t = svd.v_t.expect("3x3 svd");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut flip = Matrix3::identity();
        flip[(2, 2)] = -1.0;
        r = u * flip * v_t;
    }
    r
}
