//! Central-difference check of the trainer objective gradients on random
//! small instances.

use devchain::transformer::objective::{multi_pair_objective_grad, pair_objective, PairMoments};
use devchain::transformer::{LossWeights, StageMap};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
/// Relative tolerance for analytic versus central-difference gradients.
pub const TOL: f64 = 1e-4;

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize, spread: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| rng.random_range(-spread..spread))
}

fn random_map(rng: &mut ChaCha8Rng, d: usize, h: usize, factored: bool) -> StageMap {
    let mut m = StageMap::perturbed_identity(d, h, factored, 0.4, true, rng);
    // Push the backward map away from an exact inverse so no cycle residual
    // sits on the L1 kink.
    for v in m.bias.iter_mut() {
        *v += rng.random_range(0.5..1.5);
    }
    m
}

fn objective(fw: &StageMap, bw: &StageMap, pairs: &[PairMoments], w: LossWeights) -> f64 {
    pairs.iter().map(|p| pair_objective(fw, bw, p, w).total).sum()
}

fn with_basis(mut m: StageMap, rng: &mut ChaCha8Rng) -> StageMap {
    let d = m.dim();
    let l = DMatrix::identity(d, d) + random_matrix(rng, d, d, 0.3);
    let r = l.clone().try_inverse().expect("invertible");
    m.basis = Some((l, r));
    m
}

pub fn worst_relative_error(seed: u64, d: usize, h: usize, factored: bool, n_pairs: usize) -> f64 {
    worst_relative_error_with(seed, d, h, factored, n_pairs, false)
}

pub fn worst_relative_error_with(
    seed: u64,
    d: usize,
    h: usize,
    factored: bool,
    n_pairs: usize,
    basis: bool,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<PairMoments> = (0..n_pairs)
        .map(|_| {
            PairMoments::new(
                random_matrix(&mut rng, 8, d, 1.0),
                random_matrix(&mut rng, 8, d, 2.0),
            )
        })
        .collect();
    let mut fw = random_map(&mut rng, d, h, factored);
    let mut bw = random_map(&mut rng, d, h, factored);
    if basis {
        fw = with_basis(fw, &mut rng);
        bw = with_basis(bw, &mut rng);
    }
    let w = LossWeights {
        cycle: 10.0,
        dist: 1.0,
    };
    let (_, gf, gb) = multi_pair_objective_grad(&fw, &bw, &pairs, w);
    let mut worst: f64 = 0.0;
    for (which, analytic) in [(0, gf.flatten()), (1, gb.flatten())] {
        let base = if which == 0 { fw.flatten() } else { bw.flatten() };
        for (i, &a) in analytic.iter().enumerate() {
            let eval = |delta: f64| {
                let mut p = base.clone();
                p[i] += delta;
                let (mut f, mut b) = (fw.clone(), bw.clone());
                if which == 0 {
                    f.unflatten(&p);
                } else {
                    b.unflatten(&p);
                }
                objective(&f, &b, &pairs, w)
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

