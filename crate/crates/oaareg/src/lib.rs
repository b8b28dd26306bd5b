//! Overlap-aware coarse-to-fine rigid point cloud registration.
//!
//! The crate covers the post-backbone half of a registration pipeline:
//! superpoint-level one-to-many soft matching with overlap gating, dense
//! correspondence extraction via optimal transport with a dustbin, attention
//! forward-pass kernels (exact, linear-kernel, rotary embedding, overlap
//! token), and pose estimation from correspondences — a feature-similarity
//! seeded estimator, a RANSAC baseline, and plain weighted SVD.
//!
//! Features are taken as input (or simulated by [`synth`]); no training
//! happens here. Everything is deterministic given the seeds in the configs.

pub mod attention;
pub mod coarse;
pub mod estimator;
pub mod fine;
pub mod geometry;
pub mod metrics;
pub mod synth;

pub use geometry::{Correspondence, CorrespondenceSet, GeometryError, PointCloud, RigidTransform};
