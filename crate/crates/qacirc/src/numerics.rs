//! Dense 64-bit float primitives underneath the model and the analysis
//! passes: a row-major matrix, numerically stable softmax, and Shannon
//! entropy in nats.
//!
//! Everything here is deterministic and allocation-explicit. There is no
//! BLAS backing on purpose: the matrices involved are tiny (64x64 at the
//! default model size) and keeping the arithmetic in plain loops makes the
//! bit-for-bit reproducibility story trivial to audit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    InvalidShape(String),
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Row-major dense matrix of `f64`.
///
/// Shape checks on the binary operations are hard errors rather than debug
/// assertions; a silent mis-shaped multiply would invalidate every score
/// downstream of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::InvalidShape(format!(
                "{}x{} matrix needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `self * x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, NumericsError> {
        if x.len() != self.cols {
            return Err(NumericsError::InvalidShape(format!(
                "matvec: {}x{} matrix against vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for c in 0..self.cols {
                acc += row[c] * x[c];
            }
            out[r] = acc;
        }
        Ok(out)
    }

    /// `self^T * x`; used by the backward pass so we never materialize
    /// transposed weight copies.
    pub fn matvec_t(&self, x: &[f64]) -> Result<Vec<f64>, NumericsError> {
        if x.len() != self.rows {
            return Err(NumericsError::InvalidShape(format!(
                "matvec_t: {}x{} matrix against vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            for c in 0..self.cols {
                out[c] += row[c] * xr;
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// ProbDist
// ---------------------------------------------------------------------------

/// A validated probability distribution: entries in [0, 1], total within
/// 1e-6 of one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

pub const PROB_SUM_TOL: f64 = 1e-6;

impl ProbDist {
    pub fn new(p: Vec<f64>) -> Result<Self, NumericsError> {
        if p.is_empty() {
            return Err(NumericsError::InvalidDistribution("empty distribution".into()));
        }
        let mut sum = 0.0;
        for (i, &v) in p.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0 + PROB_SUM_TOL).contains(&v) {
                return Err(NumericsError::InvalidDistribution(format!(
                    "entry {i} is {v}, outside [0, 1]"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(NumericsError::InvalidDistribution(format!(
                "total mass {sum} differs from 1 by more than {PROB_SUM_TOL}"
            )));
        }
        Ok(ProbDist(p))
    }

    /// Renormalizes a non-negative slice (e.g. an attention row restricted to
    /// the context window) into a distribution.
    pub fn renormalized(weights: &[f64]) -> Result<Self, NumericsError> {
        if weights.is_empty() {
            return Err(NumericsError::InvalidDistribution("empty window".into()));
        }
        let mut sum = 0.0;
        for &w in weights {
            if !w.is_finite() || w < 0.0 {
                return Err(NumericsError::NonFiniteInput(format!(
                    "window weight {w} is negative or non-finite"
                )));
            }
            sum += w;
        }
        if sum <= 0.0 {
            return Err(NumericsError::InvalidDistribution(
                "window carries zero total mass".into(),
            ));
        }
        Ok(ProbDist(weights.iter().map(|w| w / sum).collect()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest entry; ties resolve to the lowest index so that
    /// greedy decoding is deterministic.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

// ---------------------------------------------------------------------------
// Free functions
// ---------------------------------------------------------------------------

/// Lowest-index argmax. Total order on finite floats; inputs are validated
/// upstream.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax: subtracts the max before exponentiation so
/// that score magnitudes in the hundreds (which the fixture uses freely)
/// cannot overflow.
pub fn softmax(logits: &[f64]) -> Result<ProbDist, NumericsError> {
    if logits.is_empty() {
        return Err(NumericsError::InvalidShape("softmax over empty slice".into()));
    }
    let mut max = f64::NEG_INFINITY;
    for &v in logits {
        if !v.is_finite() {
            return Err(NumericsError::NonFiniteInput(format!("logit {v}")));
        }
        if v > max {
            max = v;
        }
    }
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(ProbDist(exps.iter().map(|e| e / sum).collect()))
}

/// Shannon entropy in nats, with the 0 * ln 0 := 0 convention.
pub fn entropy(p: &ProbDist) -> f64 {
    p.as_slice()
        .iter()
        .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
        .sum()
}
