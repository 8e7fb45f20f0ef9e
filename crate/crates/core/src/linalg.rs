//! Dense vector primitives and the least-squares line fit.
//!
//! All reductions use a fixed accumulation order so results are reproducible
//! bit-for-bit regardless of how many threads the caller uses.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norm floor below which a vector is treated as zero by [`cosine`].
pub const DEFAULT_EPS: f64 = 1e-12;

const LANES: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: left has {left} entries, right has {right}")]
    Dimension { left: usize, right: usize },
    #[error("empty vector")]
    Empty,
    #[error("non-finite entry at index {index}")]
    NonFinite { index: usize },
    #[error("degenerate fit: {0}")]
    DegenerateFit(&'static str),
}

/// Owned vector of 64-bit floats with validated construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vec64(Vec<f64>);

impl Vec64 {
    /// Validates that the vector is non-empty and every entry is finite.
    pub fn new(values: Vec<f64>) -> Result<Self, LinalgError> {
        if values.is_empty() {
            return Err(LinalgError::Empty);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite { index });
        }
        Ok(Self(values))
    }

    /// Trusted path: no validation.
    pub fn from_trusted(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for Vec64 {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Inner product with a fixed 8-lane accumulation order.
///
/// Element `i` of each full 8-chunk is added into lane `i % 8`; lanes are
/// combined as a balanced tree and the tail is added sequentially afterwards.
/// Multiplication commutes, so `dot(a, b) == dot(b, a)` bit-for-bit.
pub fn dot(a: &[f64], b: &[f64]) -> Result<f64, LinalgError> {
    if a.len() != b.len() {
        return Err(LinalgError::Dimension {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(dot_unchecked(a, b))
}

pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for k in 0..LANES {
            lanes[k] += xa[k] * xb[k];
        }
    }
    let mut sum = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    for (x, y) in ra.iter().zip(rb) {
        sum += x * y;
    }
    sum
}

pub fn norm(a: &[f64]) -> f64 {
    dot_unchecked(a, a).sqrt()
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
///
/// Returns 0 when either vector has norm below `eps`.
pub fn cosine(a: &[f64], b: &[f64], eps: f64) -> Result<f64, LinalgError> {
    let ab = dot(a, b)?;
    Ok(cosine_from_dots(ab, dot_unchecked(a, a), dot_unchecked(b, b), eps))
}

/// Cosine given the three inner products `a·b`, `a·a`, `b·b`.
///
/// `sqrt(aa * bb)` rather than `sqrt(aa) * sqrt(bb)` keeps the self-cosine
/// exactly 1.
pub fn cosine_from_dots(ab: f64, aa: f64, bb: f64, eps: f64) -> f64 {
    let eps2 = eps * eps;
    if aa < eps2 || bb < eps2 {
        return 0.0;
    }
    (ab / (aa * bb).sqrt()).clamp(-1.0, 1.0)
}

/// Least-squares line `y = slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub n_points: usize,
}

impl LineFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

/// Ordinary least squares over `(x, y)` points, using centred sums.
pub fn ols_fit(points: &[(f64, f64)]) -> Result<LineFit, LinalgError> {
    let n = points.len();
    if n < 2 {
        return Err(LinalgError::DegenerateFit("fewer than 2 points"));
    }
    let nf = n as f64;
    // one refinement pass so a constant column centres to exact zeros
    let mean = |f: fn(&(f64, f64)) -> f64| {
        let m = points.iter().map(f).sum::<f64>() / nf;
        m + points.iter().map(|p| f(p) - m).sum::<f64>() / nf
    };
    let mean_x = mean(|p| p.0);
    let mean_y = mean(|p| p.1);
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for &(x, y) in points {
        let dx = x - mean_x;
        sxx += dx * dx;
        sxy += dx * (y - mean_y);
    }
    if !(sxx > 0.0) || !sxx.is_finite() {
        return Err(LinalgError::DegenerateFit("zero variance in x"));
    }
    let slope = sxy / sxx;
    Ok(LineFit {
        slope,
        intercept: mean_y - slope * mean_x,
        n_points: n,
    })
}
