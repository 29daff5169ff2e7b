//! Synthetic developmental processes with exact ground-truth ages.
//!
//! Stage `i` is generated as `x = A_i z + b_i [+ warp_i(z)] + noise` with
//! fresh latents `z ~ N(0, I_k)` per stage, so no individual appears in two
//! stages. Consecutive stages are linked by transition maps
//! `A_{i+1} = M_j A_i`, `b_{i+1} = M_j b_i + t_j`; the schedule decides which
//! transitions share one `M_j`.
//!
//! Every map keeps a fixed unit "age direction" `u` invariant
//! (`u^T M_j = u^T`), and `u^T A_1 = jitter * e_0^T`, so the true age
//! `target_i + jitter * z_0` equals `u . x` up to noise and an affine
//! estimator can recover it.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{DomainSequence, Sample, StageDataset};
use crate::error::{Error, Result};
use crate::scorer::LabeledSample;
use crate::seed;

/// Which transitions share a generating map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MapSchedule {
    AllDistinct,
    /// Stages `first..=last` are generated by one repeated transition map
    /// (transitions `first -> first+1`, ..., `last-1 -> last`).
    SharedMiddle { first: usize, last: usize },
    /// Map id per transition; equal ids share a map.
    Custom { ids: Vec<usize> },
}

impl MapSchedule {
    /// Map id of each of the `n_stages - 1` transitions.
    pub fn transition_ids(&self, n_stages: usize) -> Result<Vec<usize>> {
        let n_trans = n_stages.saturating_sub(1);
        match self {
            MapSchedule::AllDistinct => Ok((0..n_trans).collect()),
            MapSchedule::SharedMiddle { first, last } => {
                if *first < 1 || last <= first || *last > n_stages {
                    return Err(Error::InvalidArgument(format!(
                        "shared_middle range {first}..={last} invalid for {n_stages} stages"
                    )));
                }
                let mut next = 0;
                let mut shared = None;
                Ok((1..=n_trans)
                    .map(|t| {
                        if t >= *first && t < *last {
                            *shared.get_or_insert_with(|| {
                                next += 1;
                                next - 1
                            })
                        } else {
                            next += 1;
                            next - 1
                        }
                    })
                    .collect())
            }
            MapSchedule::Custom { ids } => {
                if ids.len() != n_trans {
                    return Err(Error::InvalidArgument(format!(
                        "custom schedule has {} ids, need {n_trans}",
                        ids.len()
                    )));
                }
                Ok(ids.clone())
            }
        }
    }
}

/// Parameters from which a random [`ProcessSpec`] is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessParams {
    pub target_means: Vec<f64>,
    pub latent_dim: usize,
    pub observable_dim: usize,
    pub noise_scale: f64,
    pub samples_per_stage: usize,
    pub age_jitter: f64,
    pub schedule: MapSchedule,
    /// Transition eigenvalues (off the age direction) lie in `1 +- spread`.
    pub spread: f64,
    /// Standard deviation of the non-age part of each transition offset.
    pub drift: f64,
    /// Scale of the per-stage `tanh` warp; 0 keeps every stage affine.
    pub warp_scale: f64,
}

impl Default for ProcessParams {
    fn default() -> Self {
        Self {
            target_means: vec![15.0, 25.0, 35.0, 45.0, 55.0, 65.0],
            latent_dim: 16,
            observable_dim: 16,
            noise_scale: 0.05,
            samples_per_stage: 512,
            age_jitter: 3.0,
            schedule: MapSchedule::SharedMiddle { first: 2, last: 5 },
            spread: 0.3,
            drift: 2.0,
            warp_scale: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Warp {
    /// `k x k`
    pub input: DMatrix<f64>,
    /// `d x k`
    pub output: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageGenerator {
    /// `d x k`
    pub linear: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub warp: Option<Warp>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessSpec {
    pub latent_dim: usize,
    pub observable_dim: usize,
    pub target_means: Vec<f64>,
    pub stages: Vec<StageGenerator>,
    /// Transition map `(M_j, t_j)` used between stage `i` and `i+1`.
    pub transitions: Vec<(DMatrix<f64>, DVector<f64>)>,
    pub noise_scale: f64,
    pub samples_per_stage: usize,
    pub age_jitter: f64,
    pub schedule: MapSchedule,
    pub age_direction: DVector<f64>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v * scale
    })
}

fn normal_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v * scale
    })
}

/// Orthonormal basis of the complement of unit vector `u` (as columns).
fn complement_basis(u: &DVector<f64>, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let d = u.len();
    let mut cols = DMatrix::zeros(d, d);
    cols.set_column(0, u);
    for c in 1..d {
        cols.set_column(c, &normal_vector(rng, d, 1.0));
    }
    let q = cols.qr().q();
    q.columns(1, d - 1).into_owned()
}

fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    m.singular_values().iter().copied().fold(f64::INFINITY, f64::min)
}

impl ProcessSpec {
    /// Draws maps for `params` from the `synth/process` substream of `seed`.
    pub fn random(params: &ProcessParams, seed: u64) -> Result<Self> {
        let n = params.target_means.len();
        let (d, k) = (params.observable_dim, params.latent_dim);
        if n < 2 {
            return Err(Error::InvalidArgument("need at least two stages".into()));
        }
        if k == 0 || d < 2 || k > d {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= latent_dim <= observable_dim and observable_dim >= 2, got k={k}, d={d}"
            )));
        }
        if !(params.spread >= 0.0 && params.spread < 1.0) {
            return Err(Error::InvalidArgument("spread must lie in [0, 1)".into()));
        }
        if !(params.drift >= 0.0 && params.drift.is_finite()) {
            return Err(Error::InvalidArgument("drift must be finite and >= 0".into()));
        }
        let ids = params.schedule.transition_ids(n)?;
        let mut rng = seed::rng(seed, "synth/process");

        let u = {
            let v = normal_vector(&mut rng, d, 1.0);
            &v / v.norm()
        };
        let proj = DMatrix::identity(d, d) - &u * u.transpose();

        // Latents 1..k map onto the complement of u with singular values in
        // [0.5, 2]; latent 0 drives u (and one more complement direction when
        // there is room), so the first stage is well conditioned.
        let basis = complement_basis(&u, &mut rng);
        let mut a1 = DMatrix::zeros(d, k);
        for j in 1..k {
            let s = rng.random_range(0.5..=2.0);
            a1.set_column(j, &(basis.column(j - 1) * s));
        }
        let mut first = &u * params.age_jitter;
        if k < d {
            first += basis.column(k - 1) * rng.random_range(0.5..=2.0);
        }
        a1.set_column(0, &first);
        let b1 = &proj * normal_vector(&mut rng, d, 5.0) + &u * params.target_means[0];

        let n_maps = ids.iter().max().map_or(0, |m| m + 1);
        let maps: Vec<(DMatrix<f64>, DVector<f64>)> = (0..n_maps)
            .map(|_| {
                let eig = DVector::from_fn(d - 1, |_, _| {
                    1.0 + rng.random_range(-params.spread..=params.spread)
                });
                let rot = complement_basis(&u, &mut rng);
                let m = &u * u.transpose()
                    + &rot * DMatrix::from_diagonal(&eig) * rot.transpose();
                let drift = &proj * normal_vector(&mut rng, d, params.drift);
                (m, drift)
            })
            .collect();

        let mut step_of_map: Vec<Option<f64>> = vec![None; n_maps];
        let mut transitions = Vec::with_capacity(n - 1);
        for (t, &id) in ids.iter().enumerate() {
            let step = params.target_means[t + 1] - params.target_means[t];
            match step_of_map[id] {
                Some(prev) if (prev - step).abs() > 1e-12 => {
                    return Err(Error::InvalidArgument(format!(
                        "shared transition map {id} needs equal target spacing"
                    )));
                }
                _ => step_of_map[id] = Some(step),
            }
            let (m, drift) = &maps[id];
            transitions.push((m.clone(), drift + &u * step));
        }

        let mut stages = Vec::with_capacity(n);
        let (mut a, mut b) = (a1, b1);
        for i in 0..n {
            let warp = (params.warp_scale > 0.0).then(|| Warp {
                input: normal_matrix(&mut rng, k, k, 1.0),
                output: &proj * normal_matrix(&mut rng, d, k, params.warp_scale),
            });
            stages.push(StageGenerator {
                linear: a.clone(),
                offset: b.clone(),
                warp,
            });
            if i + 1 < n {
                let (m, t) = &transitions[i];
                a = m * &a;
                b = m * &b + t;
            }
        }

        let spec = ProcessSpec {
            latent_dim: k,
            observable_dim: d,
            target_means: params.target_means.clone(),
            stages,
            transitions,
            noise_scale: params.noise_scale,
            samples_per_stage: params.samples_per_stage,
            age_jitter: params.age_jitter,
            schedule: params.schedule.clone(),
            age_direction: u,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_stage < 2 {
            return Err(Error::InvalidArgument(
                "samples_per_stage must be >= 2 (sigma needs >= 2 samples)".into(),
            ));
        }
        if !(self.noise_scale >= 0.0) || !(self.age_jitter >= 0.0) {
            return Err(Error::InvalidArgument(
                "noise_scale and age_jitter must be >= 0".into(),
            ));
        }
        if self.target_means.len() != self.stages.len() {
            return Err(Error::InvalidArgument("one target mean per stage required".into()));
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.linear.shape() != (self.observable_dim, self.latent_dim)
                || st.offset.len() != self.observable_dim
            {
                return Err(Error::InvalidArgument(format!("stage {} map has wrong shape", i + 1)));
            }
            let smin = min_singular_value(&st.linear);
            let smax = st.linear.norm();
            if !(smin > 1e-10 * smax.max(1.0)) {
                return Err(Error::RankDeficient { stage: i + 1 });
            }
        }
        Ok(())
    }
}

/// Generated stages with their per-sample ground-truth ages.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub sequence: DomainSequence,
    /// `labels[i][r]` is the true age of row `r` of stage `i + 1`.
    pub labels: Vec<Vec<f64>>,
}

impl SyntheticData {
    pub fn labeled(&self) -> Vec<LabeledSample> {
        self.sequence
            .stages()
            .iter()
            .zip(&self.labels)
            .flat_map(|(st, ages)| {
                st.samples.iter().zip(ages).map(|(s, &a)| LabeledSample {
                    sample: s.clone(),
                    true_age: a,
                })
            })
            .collect()
    }
}

/// Draws one dataset from `spec`. Deterministic in `(spec, seed)`; every
/// stage uses its own substream.
pub fn generate_process(spec: &ProcessSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let (d, k) = (spec.observable_dim, spec.latent_dim);
    let mut stages = Vec::with_capacity(spec.n_stages());
    let mut labels = Vec::with_capacity(spec.n_stages());
    for (i, gen) in spec.stages.iter().enumerate() {
        let mut rng = seed::rng(seed, &format!("synth/stage/{}", i + 1));
        let mut samples = Vec::with_capacity(spec.samples_per_stage);
        let mut ages = Vec::with_capacity(spec.samples_per_stage);
        for _ in 0..spec.samples_per_stage {
            let z = normal_vector(&mut rng, k, 1.0);
            let mut x = &gen.linear * &z + &gen.offset;
            if let Some(w) = &gen.warp {
                x += &w.output * (&w.input * &z).map(f64::tanh);
            }
            if spec.noise_scale > 0.0 {
                x += normal_vector(&mut rng, d, spec.noise_scale);
            }
            samples.push(Sample::new(x.iter().copied().collect())?);
            ages.push(spec.target_means[i] + spec.age_jitter * z[0]);
        }
        stages.push(StageDataset::new(i + 1, samples, spec.target_means[i]));
        labels.push(ages);
    }
    Ok(SyntheticData {
        sequence: DomainSequence::new(stages, d)?,
        labels,
    })
}

/// Loads a stage directory written by [`crate::io::write_stage_dir`].
pub fn load_stages(path: &std::path::Path) -> Result<DomainSequence> {
    crate::io::read_stage_dir(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(schedule: MapSchedule, k: usize, d: usize) -> ProcessParams {
        ProcessParams {
            latent_dim: k,
            observable_dim: d,
            samples_per_stage: 64,
            schedule,
            ..ProcessParams::default()
        }
    }

    #[test]
    fn shared_middle_ids() {
        let ids = MapSchedule::SharedMiddle { first: 2, last: 5 }
            .transition_ids(6)
            .unwrap();
        assert_eq!(ids, vec![0, 1, 1, 1, 2]);
        assert_eq!(MapSchedule::AllDistinct.transition_ids(4).unwrap(), vec![0, 1, 2]);
        assert!(MapSchedule::SharedMiddle { first: 5, last: 3 }
            .transition_ids(6)
            .is_err());
    }

    #[test]
    fn shared_transitions_have_identical_least_squares_maps() {
        // k = d so A_i is invertible and the moment-level map is unique.
        let spec = ProcessSpec::random(
            &params(MapSchedule::SharedMiddle { first: 2, last: 5 }, 6, 6),
            11,
        )
        .unwrap();
        let fitted: Vec<(DMatrix<f64>, DVector<f64>)> = (0..5)
            .map(|i| {
                let (a0, b0) = (&spec.stages[i].linear, &spec.stages[i].offset);
                let (a1, b1) = (&spec.stages[i + 1].linear, &spec.stages[i + 1].offset);
                let w = a1 * a0.clone().try_inverse().unwrap();
                let c = b1 - &w * b0;
                (w, c)
            })
            .collect();
        for j in [2, 3] {
            let dw = crate::linalg::frobenius(&(&fitted[j].0 - &fitted[1].0));
            let dc = (&fitted[j].1 - &fitted[1].1).norm();
            assert!(dw < 1e-8 && dc < 1e-8, "transition {j}: {dw} {dc}");
        }
        let d0 = crate::linalg::frobenius(&(&fitted[0].0 - &fitted[1].0));
        assert!(d0 > 1e-2);
    }

    #[test]
    fn noiseless_samples_lie_on_affine_image() {
        let mut p = params(MapSchedule::AllDistinct, 5, 5);
        p.noise_scale = 0.0;
        let spec = ProcessSpec::random(&p, 3).unwrap();
        let data = generate_process(&spec, 4).unwrap();
        for (st, gen) in data.sequence.stages().iter().zip(&spec.stages) {
            let inv = gen.linear.clone().try_inverse().unwrap();
            for s in &st.samples {
                let x = DVector::from_column_slice(s.features());
                let z = &inv * (&x - &gen.offset);
                let back = &gen.linear * z + &gen.offset;
                assert!((back - x).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn age_is_readable_along_the_age_direction() {
        let mut p = params(MapSchedule::AllDistinct, 4, 8);
        p.noise_scale = 0.0;
        let spec = ProcessSpec::random(&p, 8).unwrap();
        let data = generate_process(&spec, 1).unwrap();
        for (st, ages) in data.sequence.stages().iter().zip(&data.labels) {
            for (s, a) in st.samples.iter().zip(ages) {
                let read: f64 = s
                    .features()
                    .iter()
                    .zip(spec.age_direction.iter())
                    .map(|(x, u)| x * u)
                    .sum();
                assert!((read - a).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        let spec = ProcessSpec::random(&ProcessParams::default(), 5).unwrap();
        let a = generate_process(&spec, 9).unwrap();
        let b = generate_process(&spec, 9).unwrap();
        let c = generate_process(&spec, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn stage_age_means_track_targets() {
        let spec = ProcessSpec::random(&ProcessParams::default(), 2).unwrap();
        let data = generate_process(&spec, 2).unwrap();
        let tol = 3.0 * spec.age_jitter / (spec.samples_per_stage as f64).sqrt();
        for (ages, target) in data.labels.iter().zip(&spec.target_means) {
            let mean = ages.iter().sum::<f64>() / ages.len() as f64;
            assert!((mean - target).abs() < tol, "{mean} vs {target}");
        }
    }

    #[test]
    fn too_few_samples_rejected() {
        let mut p = ProcessParams::default();
        p.samples_per_stage = 1;
        let err = ProcessSpec::random(&p, 0).unwrap_err();
        assert!(err.to_string().contains("sigma needs >= 2"));
    }

    #[test]
    fn rank_deficient_map_rejected() {
        let mut spec = ProcessSpec::random(&params(MapSchedule::AllDistinct, 3, 6), 0).unwrap();
        let col = spec.stages[2].linear.column(0).into_owned();
        spec.stages[2].linear.set_column(1, &col);
        assert!(matches!(
            generate_process(&spec, 0),
            Err(Error::RankDeficient { stage: 3 })
        ));
    }
}
