//! Training objective of the moment-matching trainer and its analytic gradient.
//!
//! For one stage pair `(source, target)` with forward map `F` and backward
//! map `G`:
//!
//! ```text
//! L = l_cycle * (cyc(G o F, source) + cyc(F o G, target))
//!   + l_dist  * (dist(F(source), target) + dist(G(target), source))
//! cyc(h, X)   = mean_x |h(x) - x|_1 / d
//! dist(Z, T)  = |mean Z - mean T|^2 + |cov Z - cov T|_F^2
//! ```

use nalgebra::{DMatrix, DVector};

use super::map::StageMap;
use crate::linalg::{center_rows, column_means, covariance};

/// A stage pair with cached first and second moments.
#[derive(Debug, Clone)]
pub struct PairMoments {
    pub source: DMatrix<f64>,
    pub target: DMatrix<f64>,
    pub source_mean: DVector<f64>,
    pub source_cov: DMatrix<f64>,
    pub target_mean: DVector<f64>,
    pub target_cov: DMatrix<f64>,
}

impl PairMoments {
    pub fn new(source: DMatrix<f64>, target: DMatrix<f64>) -> Self {
        Self {
            source_mean: column_means(&source),
            source_cov: covariance(&source),
            target_mean: column_means(&target),
            target_cov: covariance(&target),
            source,
            target,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cycle: f64,
    pub dist: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveTerms {
    pub cycle_source: f64,
    pub cycle_target: f64,
    pub dist_forward: f64,
    pub dist_backward: f64,
    pub total: f64,
}

/// Moment distance of `z` against target moments, and its gradient w.r.t. `z`.
pub(crate) fn moment_distance(
    z: &DMatrix<f64>,
    target_mean: &DVector<f64>,
    target_cov: &DMatrix<f64>,
) -> (f64, DMatrix<f64>) {
    let n = z.nrows() as f64;
    let mean = column_means(z);
    let centered = center_rows(z, &mean);
    let cov = (centered.transpose() * &centered) / n;
    let mean_diff = &mean - target_mean;
    let cov_diff = cov - target_cov;
    let value = mean_diff.norm_squared() + cov_diff.norm_squared();
    let mut grad = centered * &cov_diff * (4.0 / n);
    for mut row in grad.row_iter_mut() {
        for (g, m) in row.iter_mut().zip(mean_diff.iter()) {
            *g += 2.0 / n * m;
        }
    }
    (value, grad)
}

/// Mean L1 cycle residual per coordinate and its (sub)gradient w.r.t. the
/// reconstruction. `sign(0) = 0`.
fn cycle_distance(recon: &DMatrix<f64>, original: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let (n, d) = recon.shape();
    let scale = 1.0 / (n * d) as f64;
    let diff = recon - original;
    let value = diff.iter().map(|v| v.abs()).sum::<f64>() * scale;
    let grad = diff.map(|v| {
        if v > 0.0 {
            scale
        } else if v < 0.0 {
            -scale
        } else {
            0.0
        }
    });
    (value, grad)
}

fn add_into(acc: &mut StageMap, g: &StageMap) {
    acc.weight += &g.weight;
    acc.bias += &g.bias;
    if let (Some(a), Some(b)) = (acc.hidden.as_mut(), g.hidden.as_ref()) {
        a.input += &b.input;
        a.offset += &b.offset;
        a.output += &b.output;
    }
}

/// Objective value only.
pub fn pair_objective(
    forward: &StageMap,
    backward: &StageMap,
    pair: &PairMoments,
    weights: LossWeights,
) -> ObjectiveTerms {
    let (fx, _) = forward.forward_batch(&pair.source);
    let (gfx, _) = backward.forward_batch(&fx);
    let (gy, _) = backward.forward_batch(&pair.target);
    let (fgy, _) = forward.forward_batch(&gy);
    let (dist_forward, _) = moment_distance(&fx, &pair.target_mean, &pair.target_cov);
    let (dist_backward, _) = moment_distance(&gy, &pair.source_mean, &pair.source_cov);
    let (cycle_source, _) = cycle_distance(&gfx, &pair.source);
    let (cycle_target, _) = cycle_distance(&fgy, &pair.target);
    let total = weights.cycle * (cycle_source + cycle_target)
        + weights.dist * (dist_forward + dist_backward);
    ObjectiveTerms {
        cycle_source,
        cycle_target,
        dist_forward,
        dist_backward,
        total,
    }
}

/// Objective value with gradients for the forward and backward maps.
pub fn pair_objective_grad(
    forward: &StageMap,
    backward: &StageMap,
    pair: &PairMoments,
    weights: LossWeights,
) -> (ObjectiveTerms, StageMap, StageMap) {
    // source -> F -> G
    let (fx, cache_fx) = forward.forward_batch(&pair.source);
    let (gfx, cache_gfx) = backward.forward_batch(&fx);
    // target -> G -> F
    let (gy, cache_gy) = backward.forward_batch(&pair.target);
    let (fgy, cache_fgy) = forward.forward_batch(&gy);

    let (dist_forward, d_fx_dist) = moment_distance(&fx, &pair.target_mean, &pair.target_cov);
    let (dist_backward, d_gy_dist) = moment_distance(&gy, &pair.source_mean, &pair.source_cov);
    let (cycle_source, d_gfx) = cycle_distance(&gfx, &pair.source);
    let (cycle_target, d_fgy) = cycle_distance(&fgy, &pair.target);

    let (g_bw_a, d_fx_cycle) = backward.backward_batch(&cache_gfx, &(d_gfx * weights.cycle));
    let d_fx = d_fx_dist * weights.dist + d_fx_cycle;
    let (mut g_fw, _) = forward.backward_batch(&cache_fx, &d_fx);

    let (g_fw_b, d_gy_cycle) = forward.backward_batch(&cache_fgy, &(d_fgy * weights.cycle));
    let d_gy = d_gy_dist * weights.dist + d_gy_cycle;
    let (mut g_bw, _) = backward.backward_batch(&cache_gy, &d_gy);

    add_into(&mut g_fw, &g_fw_b);
    add_into(&mut g_bw, &g_bw_a);

    let total = weights.cycle * (cycle_source + cycle_target)
        + weights.dist * (dist_forward + dist_backward);
    (
        ObjectiveTerms {
            cycle_source,
            cycle_target,
            dist_forward,
            dist_backward,
            total,
        },
        g_fw,
        g_bw,
    )
}

/// Same objective summed over several pairs with equal weight. Used by the
/// gradient check and the monotonicity tests.
pub fn multi_pair_objective_grad(
    forward: &StageMap,
    backward: &StageMap,
    pairs: &[PairMoments],
    weights: LossWeights,
) -> (f64, StageMap, StageMap) {
    let mut total = 0.0;
    let mut acc: Option<(StageMap, StageMap)> = None;
    for p in pairs {
        let (terms, gf, gb) = pair_objective_grad(forward, backward, p, weights);
        total += terms.total;
        match acc.as_mut() {
            None => acc = Some((gf, gb)),
            Some((af, ab)) => {
                add_into(af, &gf);
                add_into(ab, &gb);
            }
        }
    }
    let (gf, gb) = acc.expect("at least one pair");
    (total, gf, gb)
}
