//! Attention forward-pass kernels used around the matching stages: exact
//! scaled-dot-product attention, linear-complexity kernel attention with the
//! `elu(x) + 1` feature map, rotary relative position embedding, and the
//! token-based overlap-detection pass.
//!
//! No training happens here. Projections are supplied by the caller;
//! [`AttentionWeights::seeded`] gives a deterministic stand-in when no learned
//! weights exist.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("channel width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("key/value row counts differ: {keys} keys vs {values} values")]
    RowCountMismatch { keys: usize, values: usize },
    #[error("feature matrix must have at least one row")]
    EmptyInput,
    #[error("matrix contains a non-finite entry")]
    NonFinite,
    #[error("rotary embedding requires an even channel count, got {dim}")]
    OddChannelCount { dim: usize },
    #[error("3d rotary embedding requires a channel count divisible by 6, got {dim}")]
    SpatialChannelCount { dim: usize },
    #[error("expected one position per row: {rows} rows vs {positions} positions")]
    PositionCountMismatch { rows: usize, positions: usize },
    #[error("kernel feature map vanished for query row {row} (zero normalizer)")]
    DegenerateKernelRow { row: usize },
}

/// A stack of token feature rows (N tokens x d channels), all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(DMatrix<f64>);

impl FeatureMatrix {
    pub fn new(rows: DMatrix<f64>) -> Result<Self, AttentionError> {
        if !rows.iter().all(|v| v.is_finite()) {
            return Err(AttentionError::NonFinite);
        }
        Ok(Self(rows))
    }

    pub fn tokens(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

/// Square projection matrices for the query/key/value/output paths.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub query: DMatrix<f64>,
    pub key: DMatrix<f64>,
    pub value: DMatrix<f64>,
    pub output: DMatrix<f64>,
}

impl AttentionWeights {
    /// Identity projections; attention then acts on the raw features.
    pub fn identity(dim: usize) -> Self {
        Self {
            query: DMatrix::identity(dim, dim),
            key: DMatrix::identity(dim, dim),
            value: DMatrix::identity(dim, dim),
            output: DMatrix::identity(dim, dim),
        }
    }

    /// Deterministic pseudo-random projections, uniform in `[-1/sqrt(d), 1/sqrt(d)]`.
    pub fn seeded(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut next = || seeded_projection_from(&mut rng, dim, dim);
        Self {
            query: next(),
            key: next(),
            value: next(),
            output: next(),
        }
    }

    pub fn dim(&self) -> usize {
        self.query.nrows()
    }
}

/// Deterministic projection matrix, uniform in `[-1/sqrt(cols), 1/sqrt(cols)]`.
pub fn seeded_projection(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    seeded_projection_from(&mut rng, rows, cols)
}

fn seeded_projection_from(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let bound = 1.0 / (cols as f64).sqrt();
    // Row-major fill so the draw order matches reading order.
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = rng.random_range(-bound..=bound);
        }
    }
    m
}

/// Overlap summary token (one feature row).
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapToken(DVector<f64>);

impl OverlapToken {
    pub fn new(vector: DVector<f64>) -> Result<Self, AttentionError> {
        if !vector.iter().all(|v| v.is_finite()) {
            return Err(AttentionError::NonFinite);
        }
        Ok(Self(vector))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }
}

/// Per-superpoint overlap confidences and the intermediate weight map, all
/// strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapScores {
    pub scores: Vec<f64>,
    pub weight_map: Vec<f64>,
}

impl OverlapScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

fn check_widths(inputs: &[&FeatureMatrix], w: &AttentionWeights) -> Result<usize, AttentionError> {
    let d = w.dim();
    for m in inputs {
        if m.dim() != d {
            return Err(AttentionError::WidthMismatch {
                expected: d,
                got: m.dim(),
            });
        }
    }
    Ok(d)
}

/// Numerically stable logistic function, clamped into the open interval (0, 1).
pub(crate) fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn elu_plus_one(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// Scaled-dot-product cross attention with a single head.
///
/// Row i of the output is `softmax(q_i' K'^T / sqrt(d)) V'` pushed through the
/// output projection, with primes denoting the projected inputs.
pub fn exact_attention(
    q: &FeatureMatrix,
    k: &FeatureMatrix,
    v: &FeatureMatrix,
    w: &AttentionWeights,
) -> Result<FeatureMatrix, AttentionError> {
    let d = check_widths(&[q, k, v], w)?;
    if k.tokens() != v.tokens() {
        return Err(AttentionError::RowCountMismatch {
            keys: k.tokens(),
            values: v.tokens(),
        });
    }
    if q.tokens() == 0 || k.tokens() == 0 {
        return Err(AttentionError::EmptyInput);
    }

    let qp = q.as_matrix() * &w.query;
    let kp = k.as_matrix() * &w.key;
    let vp = v.as_matrix() * &w.value;

    let scale = 1.0 / (d as f64).sqrt();
    let mut logits = qp * kp.transpose();
    logits *= scale;

    // Row-wise softmax with the usual max shift.
    for mut row in logits.row_iter_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row /= sum;
    }

    FeatureMatrix::new(logits * vp * &w.output)
}

/// Linear-complexity attention with the kernel `phi(x) = elu(x) + 1`.
///
/// Evaluates `phi(Q') (phi(K')^T V')` with row normalization, so the cost is
/// linear in the token count; up to floating error the result equals the
/// quadratic evaluation of the same kernel.
pub fn linear_attention(
    q: &FeatureMatrix,
    k: &FeatureMatrix,
    v: &FeatureMatrix,
    w: &AttentionWeights,
) -> Result<FeatureMatrix, AttentionError> {
    check_widths(&[q, k, v], w)?;
    if k.tokens() != v.tokens() {
        return Err(AttentionError::RowCountMismatch {
            keys: k.tokens(),
            values: v.tokens(),
        });
    }
    if q.tokens() == 0 || k.tokens() == 0 {
        return Err(AttentionError::EmptyInput);
    }

    let qp = (q.as_matrix() * &w.query).map(elu_plus_one);
    let kp = (k.as_matrix() * &w.key).map(elu_plus_one);
    let vp = v.as_matrix() * &w.value;

    // d x d and d x 1 summaries of the keys; never materializes an N x N matrix.
    let kv = kp.transpose() * &vp;
    let key_totals = kp.row_sum().transpose();

    let mut out = DMatrix::zeros(qp.nrows(), vp.ncols());
    for i in 0..qp.nrows() {
        let phi_q = qp.row(i);
        let normalizer = phi_q.transpose().dot(&key_totals);
        if normalizer <= 0.0 {
            return Err(AttentionError::DegenerateKernelRow { row: i });
        }
        let numer = phi_q * &kv;
        out.row_mut(i).copy_from(&(numer / normalizer));
    }

    FeatureMatrix::new(out * &w.output)
}

/// Token positions for [`rotary_embed`]: scalar (sequence index) or 3D.
#[derive(Debug, Clone)]
pub enum RotaryPositions<'a> {
    Scalar(&'a [f64]),
    Spatial(&'a [Vector3<f64>]),
}

impl RotaryPositions<'_> {
    fn len(&self) -> usize {
        match self {
            RotaryPositions::Scalar(p) => p.len(),
            RotaryPositions::Spatial(p) => p.len(),
        }
    }
}

const ROTARY_BASE: f64 = 10_000.0;

/// Rotates consecutive channel pairs of each row by angles proportional to
/// the row's position, so dot products between embedded rows depend only on
/// position differences. Norms are preserved.
///
/// Scalar positions need an even channel count; 3D positions are embedded
/// per axis over three equal channel groups, so the channel count must be
/// divisible by 6.
pub fn rotary_embed(
    x: &FeatureMatrix,
    positions: &RotaryPositions<'_>,
) -> Result<FeatureMatrix, AttentionError> {
    let d = x.dim();
    if d % 2 != 0 {
        return Err(AttentionError::OddChannelCount { dim: d });
    }
    if positions.len() != x.tokens() {
        return Err(AttentionError::PositionCountMismatch {
            rows: x.tokens(),
            positions: positions.len(),
        });
    }

    let mut out = x.as_matrix().clone();
    match positions {
        RotaryPositions::Scalar(pos) => {
            rotate_channel_block(&mut out, 0, d, pos, |&p| p);
        }
        RotaryPositions::Spatial(pos) => {
            if d % 6 != 0 {
                return Err(AttentionError::SpatialChannelCount { dim: d });
            }
            let group = d / 3;
            for axis in 0..3 {
                rotate_channel_block(&mut out, axis * group, group, pos, move |p| p[axis]);
            }
        }
    }
    FeatureMatrix::new(out)
}

/// Applies the rotary rotation to `width` channels starting at `offset`,
/// using `coord(position)` as the scalar position of each row.
fn rotate_channel_block<P>(
    m: &mut DMatrix<f64>,
    offset: usize,
    width: usize,
    positions: &[P],
    coord: impl Fn(&P) -> f64,
) {
    let half = width / 2;
    for (row, pos) in positions.iter().enumerate() {
        let p = coord(pos);
        for pair in 0..half {
            let freq = ROTARY_BASE.powf(-2.0 * pair as f64 / width as f64);
            let angle = p * freq;
            let (sin, cos) = angle.sin_cos();
            let a = m[(row, offset + 2 * pair)];
            let b = m[(row, offset + 2 * pair + 1)];
            m[(row, offset + 2 * pair)] = a * cos - b * sin;
            m[(row, offset + 2 * pair + 1)] = a * sin + b * cos;
        }
    }
}

/// Overlap token forward pass: channel-wise max pooling over the feature
/// rows, then one cross attention with the pooled token as the query and the
/// features as keys and values.
pub fn overlap_token_forward(
    h: &FeatureMatrix,
    w: &AttentionWeights,
) -> Result<OverlapToken, AttentionError> {
    if h.tokens() == 0 {
        return Err(AttentionError::EmptyInput);
    }
    check_widths(&[h], w)?;

    let d = h.dim();
    let mut pooled = DMatrix::from_element(1, d, f64::NEG_INFINITY);
    for row in h.as_matrix().row_iter() {
        for c in 0..d {
            pooled[(0, c)] = pooled[(0, c)].max(row[c]);
        }
    }

    let token = exact_attention(&FeatureMatrix::new(pooled)?, h, h, w)?;
    OverlapToken::new(token.as_matrix().row(0).transpose())
}

/// Per-row overlap confidence from a decoded token.
///
/// `w = sigmoid(h_i . token)` re-weights each feature row, and the confidence
/// is `sigmoid((w_i h_i + h_i) . projection)`. All outputs are strictly inside
/// (0, 1).
pub fn overlap_confidence(
    h: &FeatureMatrix,
    token: &OverlapToken,
    projection: &DVector<f64>,
) -> Result<OverlapScores, AttentionError> {
    let d = h.dim();
    if token.dim() != d {
        return Err(AttentionError::WidthMismatch {
            expected: d,
            got: token.dim(),
        });
    }
    if projection.len() != d {
        return Err(AttentionError::WidthMismatch {
            expected: d,
            got: projection.len(),
        });
    }

    let n = h.tokens();
    let mut weight_map = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let row = h.as_matrix().row(i);
        let w = sigmoid(row.transpose().dot(token.as_vector()));
        weight_map.push(w);
        let gated = row * (w + 1.0);
        scores.push(sigmoid(gated.transpose().dot(projection)));
    }
    Ok(OverlapScores { scores, weight_map })
}
