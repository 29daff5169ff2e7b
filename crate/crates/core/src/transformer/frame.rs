//! Per-module working coordinates `z = A (x - o)`.
//!
//! `o` is the pooled mean and `A` the inverse square root of the average
//! within-stage covariance of the data a module is first trained on. The
//! frame is fixed from then on, so warm-started training and the factored
//! weight constraint always refer to the same coordinates.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{column_means, covariance};

/// Eigenvalues below this fraction of the largest are clamped before
/// inversion, which keeps degenerate (noiseless, low-rank) stages usable.
const EIGEN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub origin: DVector<f64>,
    pub whiten: DMatrix<f64>,
    pub unwhiten: DMatrix<f64>,
}

impl Frame {
    pub fn identity(d: usize) -> Self {
        Self {
            origin: DVector::zeros(d),
            whiten: DMatrix::identity(d, d),
            unwhiten: DMatrix::identity(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.origin.len()
    }

    /// Fits a frame to row-per-sample datasets of equal width.
    pub fn fit(datasets: &[&DMatrix<f64>]) -> Result<Self> {
        let d = datasets.first().map(|m| m.ncols()).ok_or(Error::EmptyDataset)?;
        let mut sum = DVector::zeros(d);
        let mut rows = 0usize;
        let mut cov = DMatrix::zeros(d, d);
        for m in datasets {
            if m.nrows() == 0 {
                return Err(Error::EmptyDataset);
            }
            sum += column_means(m) * m.nrows() as f64;
            rows += m.nrows();
            cov += covariance(m);
        }
        let origin = sum / rows as f64;
        cov /= datasets.len() as f64;
        let eig = cov.symmetric_eigen();
        let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        if !(top > 0.0) || !top.is_finite() {
            return Ok(Self {
                origin,
                ..Self::identity(d)
            });
        }
        let floor = top * EIGEN_FLOOR;
        let clamp = |v: f64| v.max(floor);
        let v = &eig.eigenvectors;
        let scaled = |f: &dyn Fn(f64) -> f64| {
            let diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| f(clamp(e))));
            v * diag * v.transpose()
        };
        let whiten = scaled(&|e| 1.0 / e.sqrt());
        let unwhiten = scaled(&|e| e.sqrt());
        Ok(Self {
            origin,
            whiten,
            unwhiten,
        })
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let shifted: Vec<f64> = x.iter().zip(self.origin.iter()).map(|(a, o)| a - o).collect();
        (0..d)
            .map(|i| (0..d).map(|j| self.whiten[(i, j)] * shifted[j]).sum())
            .collect()
    }

    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| (0..d).map(|j| self.unwhiten[(i, j)] * z[j]).sum::<f64>() + self.origin[i])
            .collect()
    }

    pub fn encode_matrix(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for mut row in out.row_iter_mut() {
            let z = self.encode(&row.iter().copied().collect::<Vec<_>>());
            for (v, zv) in row.iter_mut().zip(z) {
                *v = zv;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.origin.iter().all(|v| v.is_finite())
            && self.whiten.iter().all(|v| v.is_finite())
            && self.unwhiten.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 3.0, 1.0, -2.0, 5.0, 0.5, 0.5]);
        let b = DMatrix::from_row_slice(3, 2, &[10.0, 1.0, 11.0, -1.0, 12.0, 3.0]);
        let f = Frame::fit(&[&a, &b]).unwrap();
        let x = [2.5, -7.0];
        let back = f.decode(&f.encode(&x));
        assert!((back[0] - x[0]).abs() < 1e-12 && (back[1] - x[1]).abs() < 1e-12);
    }

    #[test]
    fn whitens_average_within_covariance() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 3.0, 1.0, -2.0, 5.0, 0.5, 0.5]);
        let b = DMatrix::from_row_slice(4, 2, &[9.0, 2.0, 8.0, 1.0, 5.0, 4.0, 7.0, -3.0]);
        let f = Frame::fit(&[&a, &b]).unwrap();
        let avg = (covariance(&f.encode_matrix(&a)) + covariance(&f.encode_matrix(&b))) * 0.5;
        assert!((avg - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn constant_data_gives_identity_scaling() {
        let a = DMatrix::from_element(3, 2, 4.0);
        let f = Frame::fit(&[&a]).unwrap();
        assert_eq!(f.whiten, DMatrix::identity(2, 2));
        assert_eq!(f.encode(&[4.0, 4.0]), vec![0.0, 0.0]);
    }
}
