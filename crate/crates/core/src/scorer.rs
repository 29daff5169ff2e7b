//! Auxiliary age estimator and the normalized score used to rank a
//! recycled transformer against a freshly trained baseline.
//!
//! The estimator never provides gradients to the transformers; it is only
//! consulted for the binary keep/discard decision between training calls.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::domain::{Sample, StageDataset};
use crate::error::{Error, Result};
use crate::transformer::ReversibleTransformer;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub sample: Sample,
    pub true_age: f64,
}

/// 64-bit fingerprint of a sample's exact feature bits.
pub fn sample_fingerprint(s: &Sample) -> u64 {
    let mut h = Sha256::new();
    for v in s.features() {
        h.update(v.to_bits().to_le_bytes());
    }
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Which labeled data produced an estimator. Fingerprints let the chain
/// harness prove the estimator never saw transformer-training samples; they
/// are not persisted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitRecord {
    pub n_samples: usize,
    pub seed: u64,
    pub fingerprints: BTreeSet<u64>,
}

/// Ridge-regularized affine age regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeEstimator {
    pub weights: DVector<f64>,
    pub bias: f64,
    pub ridge: f64,
    pub record: FitRecord,
}

/// Fits `age ~ w.x + b` minimizing squared error plus `ridge * |w|^2`
/// (bias unpenalized). Deterministic; `seed` is only recorded.
pub fn fit_estimator(labeled: &[LabeledSample], ridge: f64, seed: u64) -> Result<AgeEstimator> {
    let d = labeled.first().map(|l| l.sample.dim()).unwrap_or(0);
    if labeled.len() < d + 1 || d == 0 {
        return Err(Error::InsufficientSamples {
            needed: d.max(1) + 1,
            got: labeled.len(),
        });
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
    }
    let n = labeled.len();
    let mut x = DMatrix::zeros(n, d);
    let mut y = DVector::zeros(n);
    for (r, l) in labeled.iter().enumerate() {
        if l.sample.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: l.sample.dim(),
            });
        }
        if !l.true_age.is_finite() {
            return Err(Error::NonFinite("true_age"));
        }
        for (c, v) in l.sample.features().iter().enumerate() {
            x[(r, c)] = *v;
        }
        y[r] = l.true_age;
    }
    let x_mean = crate::linalg::column_means(&x);
    let y_mean = y.mean();
    let xc = crate::linalg::center_rows(&x, &x_mean);
    let yc = y.add_scalar(-y_mean);
    let mut gram = xc.transpose() * &xc;
    for i in 0..d {
        gram[(i, i)] += ridge;
    }
    let rhs = xc.transpose() * yc;
    let weights = gram
        .cholesky()
        .ok_or(Error::Singular("feature Gram matrix is not positive definite"))?
        .solve(&rhs);
    let bias = y_mean - weights.dot(&x_mean);
    if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("estimator parameters"));
    }
    Ok(AgeEstimator {
        weights,
        bias,
        ridge,
        record: FitRecord {
            n_samples: n,
            seed,
            fingerprints: labeled.iter().map(|l| sample_fingerprint(&l.sample)).collect(),
        },
    })
}

impl AgeEstimator {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn estimate(&self, s: &Sample) -> Result<f64> {
        if s.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: s.dim(),
            });
        }
        let mut age = self.bias;
        for (w, x) in self.weights.iter().zip(s.features()) {
            age += w * x;
        }
        if !age.is_finite() {
            return Err(Error::NonFinite("estimated age"));
        }
        Ok(age)
    }

    /// Number of samples of `ds` the estimator was fitted on.
    pub fn overlap_with(&self, ds: &StageDataset) -> usize {
        ds.samples
            .iter()
            .filter(|s| self.record.fingerprints.contains(&sample_fingerprint(s)))
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreReport {
    pub mean_abs_error: f64,
    pub std_dev: f64,
    pub normalized_error: f64,
    pub n_samples: usize,
    pub sigma_floored: bool,
    /// Mean of the estimated ages; reported alongside the score.
    pub mean_age: f64,
}

/// The score formula on raw estimated ages:
/// `E = |mean |age - target| / max(sigma, floor)|` with population `sigma`.
pub fn score_ages(ages: &[f64], target_mean: f64, sigma_floor: f64) -> Result<ScoreReport> {
    if ages.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = ages.len() as f64;
    let mean_age = ages.iter().sum::<f64>() / n;
    let mean_abs_error = ages.iter().map(|a| (a - target_mean).abs()).sum::<f64>() / n;
    let var = ages.iter().map(|a| (a - mean_age) * (a - mean_age)).sum::<f64>() / n;
    let std_dev = var.sqrt();
    let sigma_floored = std_dev < sigma_floor;
    // The outer absolute value is kept from the reference formula; it is a
    // no-op for these non-negative terms.
    let normalized_error = (mean_abs_error / std_dev.max(sigma_floor)).abs();
    if !normalized_error.is_finite() {
        return Err(Error::NonFinite("normalized error"));
    }
    Ok(ScoreReport {
        mean_abs_error,
        std_dev,
        normalized_error,
        n_samples: ages.len(),
        sigma_floored,
        mean_age,
    })
}

/// Estimated ages of `F(x)` for every `x` in `source`.
pub fn transformed_ages(
    phi: &ReversibleTransformer,
    source: &StageDataset,
    gamma: &AgeEstimator,
) -> Result<Vec<f64>> {
    source
        .samples
        .iter()
        .map(|s| gamma.estimate(&phi.apply_forward(s)?))
        .collect()
}

/// Scores a transformer on `source` against the next stage's target mean.
pub fn score_error(
    phi: &ReversibleTransformer,
    source: &StageDataset,
    target_mean: f64,
    gamma: &AgeEstimator,
    sigma_floor: f64,
) -> Result<ScoreReport> {
    if source.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ages = transformed_ages(phi, source, gamma)?;
    score_ages(&ages, target_mean, sigma_floor)
}
