//! Small dense helpers shared by the trainer, scorer and synthetic process.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Column means of a row-per-sample matrix.
pub fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

/// Population covariance (divide by `n`) of a row-per-sample matrix.
pub fn covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = column_means(x);
    let centered = center_rows(x, &mean);
    (centered.transpose() * &centered) / x.nrows() as f64
}

pub fn center_rows(x: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(mean.iter()) {
            *v -= m;
        }
    }
    out
}

/// Applies `f` to the eigenvalues of a symmetric matrix.
pub fn sym_apply(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(f);
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Principal square root of a symmetric positive semi-definite matrix.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_apply(m, |v| v.max(0.0).sqrt())
}

/// Inverse principal square root; fails when `m` is not positive definite.
pub fn sym_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.amax();
    if eig.eigenvalues.iter().any(|&v| v <= 1e-14 * max.max(1.0)) {
        return Err(Error::Singular("covariance is not positive definite"));
    }
    let vals = eig.eigenvalues.map(|v| 1.0 / v.sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// The unique symmetric positive definite `W` with `W * source_cov * W = target_cov`,
/// i.e. the linear part of the optimal-transport map between two Gaussians.
pub fn monge_linear(source_cov: &DMatrix<f64>, target_cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s_half = sym_sqrt(source_cov);
    let s_inv_half = sym_inv_sqrt(source_cov)?;
    let middle = sym_sqrt(&(&s_half * target_cov * &s_half));
    Ok(&s_inv_half * middle * &s_inv_half)
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}
