//! Rigid-body geometry primitives and the shared domain types: point clouds
//! with optional descriptors, SE(3) transforms, and correspondence sets.

use nalgebra::{DMatrix, Matrix3, Vector3};
use thiserror::Error;

/// Tolerance for the SO(3) membership checks on [`RigidTransform`].
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("point {index} has a non-finite coordinate")]
    NonFinitePoint { index: usize },
    #[error("descriptor matrix has {rows} rows but the cloud has {points} points")]
    DescriptorRowMismatch { points: usize, rows: usize },
    #[error("descriptor matrix contains a non-finite entry")]
    NonFiniteDescriptor,
    #[error("rotation is not orthonormal (max deviation {deviation:.3e})")]
    NonOrthonormalRotation { deviation: f64 },
    #[error("rotation determinant is {det:.6} (expected +1)")]
    ImproperRotation { det: f64 },
    #[error("translation has a non-finite component")]
    NonFiniteTranslation,
    #[error("correspondence ({src}, {tgt}) is out of range for clouds of size {src_len}x{tgt_len}")]
    IndexOutOfRange {
        src: usize,
        tgt: usize,
        src_len: usize,
        tgt_len: usize,
    },
    #[error("duplicate correspondence pair ({src}, {tgt})")]
    DuplicatePair { src: usize, tgt: usize },
    #[error("correspondence confidence {value} is outside [0, 1]")]
    ConfidenceOutOfRange { value: f64 },
}

/// An ordered set of 3D points with optional per-point descriptor rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
    descriptors: Option<DMatrix<f64>>,
}

impl PointCloud {
    /// Builds a cloud without descriptors. Every coordinate must be finite.
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, GeometryError> {
        for (index, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(GeometryError::NonFinitePoint { index });
            }
        }
        Ok(Self {
            points,
            descriptors: None,
        })
    }

    /// Builds a cloud with one descriptor row per point.
    pub fn with_descriptors(
        points: Vec<Vector3<f64>>,
        descriptors: DMatrix<f64>,
    ) -> Result<Self, GeometryError> {
        if descriptors.nrows() != points.len() {
            return Err(GeometryError::DescriptorRowMismatch {
                points: points.len(),
                rows: descriptors.nrows(),
            });
        }
        if !descriptors.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFiniteDescriptor);
        }
        let mut cloud = Self::new(points)?;
        cloud.descriptors = Some(descriptors);
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn point(&self, index: usize) -> &Vector3<f64> {
        &self.points[index]
    }

    pub fn descriptors(&self) -> Option<&DMatrix<f64>> {
        self.descriptors.as_ref()
    }

    /// Width of the descriptor rows, if descriptors are attached.
    pub fn descriptor_dim(&self) -> Option<usize> {
        self.descriptors.as_ref().map(|d| d.ncols())
    }

    /// Replaces the descriptor matrix, keeping the points.
    pub fn set_descriptors(&mut self, descriptors: DMatrix<f64>) -> Result<(), GeometryError> {
        if descriptors.nrows() != self.points.len() {
            return Err(GeometryError::DescriptorRowMismatch {
                points: self.points.len(),
                rows: descriptors.nrows(),
            });
        }
        if !descriptors.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFiniteDescriptor);
        }
        self.descriptors = Some(descriptors);
        Ok(())
    }
}

/// A rotation + translation pair; the estimation target of registration.
///
/// The rotation is kept as a 3x3 matrix because the weighted-SVD solver
/// produces one directly. Constructors reject matrices that are not in SO(3)
/// within [`ROTATION_TOL`]; nothing is silently re-projected here.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates SO(3) membership: `R^T R = I` and `det R = +1`, both within
    /// [`ROTATION_TOL`].
    pub fn try_new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        if !rotation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonOrthonormalRotation { deviation: f64::NAN });
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFiniteTranslation);
        }
        let gram = rotation.transpose() * rotation;
        let deviation = (gram - Matrix3::identity()).abs().max();
        if deviation > ROTATION_TOL {
            return Err(GeometryError::NonOrthonormalRotation { deviation });
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::ImproperRotation { det });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Internal constructor for values produced by operations that preserve
    /// SO(3) membership by construction (compose, invert, SVD re-projection).
    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Maps a single point: `R p + t`.
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Composition such that `compose(a, b).apply(p) == a.apply(&b.apply(p))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::from_parts_unchecked(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    /// Inverse transform: `(R^T, -R^T t)`.
    pub fn invert(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::from_parts_unchecked(rt, -(rt * self.translation))
    }
}

/// Applies `t` to every point of `p`; descriptors are carried through.
pub fn apply_transform(t: &RigidTransform, p: &PointCloud) -> PointCloud {
    PointCloud {
        points: p.points.iter().map(|x| t.apply(x)).collect(),
        descriptors: p.descriptors.clone(),
    }
}

/// One putative match between a source and a target point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source_index: usize,
    pub target_index: usize,
    pub confidence: f64,
}

/// A deduplicated set of correspondences, validated against the sizes of the
/// clouds it refers to.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pairs: Vec<Correspondence>,
    src_len: usize,
    tgt_len: usize,
}

impl CorrespondenceSet {
    pub fn new(
        pairs: Vec<Correspondence>,
        src_len: usize,
        tgt_len: usize,
    ) -> Result<Self, GeometryError> {
        let mut seen = std::collections::HashSet::with_capacity(pairs.len());
        for c in &pairs {
            if c.source_index >= src_len || c.target_index >= tgt_len {
                return Err(GeometryError::IndexOutOfRange {
                    src: c.source_index,
                    tgt: c.target_index,
                    src_len,
                    tgt_len,
                });
            }
            if !c.confidence.is_finite() || !(0.0..=1.0).contains(&c.confidence) {
                return Err(GeometryError::ConfidenceOutOfRange {
                    value: c.confidence,
                });
            }
            if !seen.insert((c.source_index, c.target_index)) {
                return Err(GeometryError::DuplicatePair {
                    src: c.source_index,
                    tgt: c.target_index,
                });
            }
        }
        Ok(Self {
            pairs,
            src_len,
            tgt_len,
        })
    }

    pub fn pairs(&self) -> &[Correspondence] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn src_len(&self) -> usize {
        self.src_len
    }

    pub fn tgt_len(&self) -> usize {
        self.tgt_len
    }

    /// The same set with pairs sorted by `(source_index, target_index)`.
    ///
    /// All estimator tie-breaking keys off this canonical order, which makes
    /// results invariant to the order in which pairs were inserted.
    pub fn canonicalized(&self) -> CorrespondenceSet {
        let mut pairs = self.pairs.clone();
        pairs.sort_by_key(|c| (c.source_index, c.target_index));
        CorrespondenceSet {
            pairs,
            src_len: self.src_len,
            tgt_len: self.tgt_len,
        }
    }
}
