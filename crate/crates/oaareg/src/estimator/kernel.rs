//! The length-discrepancy consistency kernel and its packed-row form, shared
//! by spectral scoring and consensus expansion.

use nalgebra::Vector3;

use crate::geometry::{CorrespondenceSet, PointCloud};

/// Endpoint coordinates of one correspondence, packed for tight loops.
pub(crate) type PairRow = [f64; 6];

/// Packs `(source point, target point)` rows for every pair of `c`, in the
/// order of `c.pairs()`.
pub(crate) fn pair_rows(c: &CorrespondenceSet, src: &PointCloud, tgt: &PointCloud) -> Vec<PairRow> {
    c.pairs()
        .iter()
        .map(|p| {
            let a = src.point(p.source_index);
            let b = tgt.point(p.target_index);
            [a.x, a.y, a.z, b.x, b.y, b.z]
        })
        .collect()
}

/// `max(0, 1 - d^2 / sigma^2)` where `d` is the difference between the
/// source-side and target-side pair lengths of two correspondences.
#[inline(always)]
pub(crate) fn consistency(a: &PairRow, b: &PairRow, sigma2: f64) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    let dp2 = dx * dx + dy * dy + dz * dz;
    let ex = a[3] - b[3];
    let ey = a[4] - b[4];
    let ez = a[5] - b[5];
    let dq2 = ex * ex + ey * ey + ez * ez;
    // (|dp| - |dq|)^2 >= (dp2 - dq2)^2 / (2 (dp2 + dq2)), so the kernel is
    // certainly zero when that lower bound already exceeds sigma^2. Most
    // outlier pairs die here without a square root.
    let sum = dp2 + dq2;
    if sum > 0.0 {
        let diff = dp2 - dq2;
        if diff * diff >= sigma2 * 2.0 * sum {
            return 0.0;
        }
    }
    let d = dp2.sqrt() - dq2.sqrt();
    (1.0 - d * d / sigma2).max(0.0)
}

/// Structure-of-arrays endpoint columns; the kernel loops below read six
/// independent streams, which vectorizes where the packed-row form cannot.
pub(crate) struct PairColumns {
    pub px: Vec<f64>,
    pub py: Vec<f64>,
    pub pz: Vec<f64>,
    pub qx: Vec<f64>,
    pub qy: Vec<f64>,
    pub qz: Vec<f64>,
}

impl PairColumns {
    pub(crate) fn from_rows(rows: &[PairRow]) -> Self {
        Self {
            px: rows.iter().map(|r| r[0]).collect(),
            py: rows.iter().map(|r| r[1]).collect(),
            pz: rows.iter().map(|r| r[2]).collect(),
            qx: rows.iter().map(|r| r[3]).collect(),
            qy: rows.iter().map(|r| r[4]).collect(),
            qz: rows.iter().map(|r| r[5]).collect(),
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.px.len()
    }

    /// Fills `out[i] = consistency(a, column i)` for `i` in `from..from+out.len()`.
    pub(crate) fn consistency_block(&self, a: &PairRow, from: usize, out: &mut [f64], sigma2: f64) {
        let to = from + out.len();
        let (px, py, pz) = (&self.px[from..to], &self.py[from..to], &self.pz[from..to]);
        let (qx, qy, qz) = (&self.qx[from..to], &self.qy[from..to], &self.qz[from..to]);
        for i in 0..out.len() {
            let dx = a[0] - px[i];
            let dy = a[1] - py[i];
            let dz = a[2] - pz[i];
            let dp2 = dx * dx + dy * dy + dz * dz;
            let ex = a[3] - qx[i];
            let ey = a[4] - qy[i];
            let ez = a[5] - qz[i];
            let dq2 = ex * ex + ey * ey + ez * ez;
            let d = dp2.sqrt() - dq2.sqrt();
            out[i] = (1.0 - d * d / sigma2).max(0.0);
        }
    }

    /// `sum_i consistency(a, column i) * weights[i]` over all columns.
    pub(crate) fn consistency_dot(&self, a: &PairRow, weights: &[f64], sigma2: f64) -> f64 {
        let n = self.len();
        let (px, py, pz) = (&self.px[..n], &self.py[..n], &self.pz[..n]);
        let (qx, qy, qz) = (&self.qx[..n], &self.qy[..n], &self.qz[..n]);
        let w = &weights[..n];
        let mut acc = 0.0;
        for i in 0..n {
            let dx = a[0] - px[i];
            let dy = a[1] - py[i];
            let dz = a[2] - pz[i];
            let dp2 = dx * dx + dy * dy + dz * dz;
            let ex = a[3] - qx[i];
            let ey = a[4] - qy[i];
            let ez = a[5] - qz[i];
            let dq2 = ex * ex + ey * ey + ez * ez;
            let d = dp2.sqrt() - dq2.sqrt();
            acc += (1.0 - d * d / sigma2).max(0.0) * w[i];
        }
        acc
    }
}

/// Scalar form of [`consistency`] on explicit endpoints.
pub(crate) fn pair_consistency(
    pa: &Vector3<f64>,
    qa: &Vector3<f64>,
    pb: &Vector3<f64>,
    qb: &Vector3<f64>,
    sigma: f64,
) -> f64 {
    consistency(
        &[pa.x, pa.y, pa.z, qa.x, qa.y, qa.z],
        &[pb.x, pb.y, pb.z, qb.x, qb.y, qb.z],
        sigma * sigma,
    )
}
