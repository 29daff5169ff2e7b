#![allow(dead_code)]

pub mod gradcheck;

use devchain::synth::{generate_process, MapSchedule, ProcessParams, ProcessSpec, SyntheticData};
use devchain::StageDataset;
use nalgebra::{DMatrix, DVector};

pub const D: usize = 16;

/// Noiseless, full-rank (`k = d`) affine process.
pub fn linear_params(n_stages: usize, schedule: MapSchedule) -> ProcessParams {
    ProcessParams {
        target_means: (0..n_stages).map(|i| 15.0 + 10.0 * i as f64).collect(),
        latent_dim: D,
        observable_dim: D,
        noise_scale: 0.0,
        samples_per_stage: 512,
        schedule,
        ..ProcessParams::default()
    }
}

pub fn draw(params: &ProcessParams, process_seed: u64, data_seed: u64) -> SyntheticData {
    let spec = ProcessSpec::random(params, process_seed).expect("process spec");
    generate_process(&spec, data_seed).expect("generated data")
}

pub fn rows(ds: &StageDataset) -> DMatrix<f64> {
    let n = ds.samples.len();
    let d = ds.samples[0].dim();
    DMatrix::from_fn(n, d, |r, c| ds.samples[r].features()[c])
}

pub fn mean(x: &DMatrix<f64>) -> DVector<f64> {
    let mut m = DVector::zeros(x.ncols());
    for r in 0..x.nrows() {
        m += x.row(r).transpose();
    }
    m / x.nrows() as f64
}

/// Population covariance (divides by `n`).
pub fn cov(x: &DMatrix<f64>) -> DMatrix<f64> {
    let m = mean(x);
    let mut c = DMatrix::zeros(x.ncols(), x.ncols());
    for r in 0..x.nrows() {
        let v = x.row(r).transpose() - &m;
        c += &v * v.transpose();
    }
    c / x.nrows() as f64
}

fn spectral(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = sym.symmetric_eigen();
    let diag = DMatrix::from_diagonal(&e.eigenvalues.map(f));
    &e.eigenvectors * diag * e.eigenvectors.transpose()
}

/// Closed-form moment-matching map `x -> W x + c` between two empirical
/// distributions: `W = S^-1/2 (S^1/2 T S^1/2)^1/2 S^-1/2`, `c = mu_t - W mu_s`.
pub fn closed_form_map(source: &DMatrix<f64>, target: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let (s, t) = (cov(source), cov(target));
    let s_half = spectral(&s, f64::sqrt);
    let s_inv_half = spectral(&s, |v| 1.0 / v.sqrt());
    let w = &s_inv_half * spectral(&(&s_half * t * &s_half), f64::sqrt) * &s_inv_half;
    let c = mean(target) - &w * mean(source);
    (w, c)
}

pub fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

pub fn rel_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// `||mean(x) - mean(y)||^2 + ||cov(x) - cov(y)||_F^2`.
pub fn moment_distance(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    (mean(x) - mean(y)).norm_squared() + (cov(x) - cov(y)).norm_squared()
}
