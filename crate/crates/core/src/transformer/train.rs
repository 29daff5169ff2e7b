
use super::objective::{pair_objective_grad, LossWeights, PairMoments};
use super::{
    Frame, Interleave, ProvenanceRecord, RetrainBudget, ReversibleTransformer, StageMap,
    TrainerSettings,
};
use nalgebra::DVector;
use crate::domain::StageDataset;
use crate::error::{Error, Result};
use crate::linalg::column_means;

/// What to train on and for how long.
#[derive(Debug, Clone)]
pub struct TrainPlan<'a> {
    pub pairs: Vec<(&'a StageDataset, &'a StageDataset)>,
    pub total_steps: usize,
    pub interleave: Interleave,
    pub budget: RetrainBudget,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub seed: u64,
    /// Call the observer every this many steps.
    pub checkpoint_interval: Option<usize>,
}

impl<'a> TrainPlan<'a> {
    pub fn new(
        pairs: Vec<(&'a StageDataset, &'a StageDataset)>,
        total_steps: usize,
        settings: &TrainerSettings,
        seed: u64,
    ) -> Self {
        Self {
            pairs,
            total_steps,
            interleave: settings.interleave,
            budget: settings.budget,
            weights: settings.weights(),
            learning_rate: settings.learning_rate,
            seed,
            checkpoint_interval: None,
        }
    }

    pub fn with_checkpoints(mut self, interval: Option<usize>) -> Self {
        self.checkpoint_interval = interval;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::InvalidArgument("total_steps must be >= 1".into()));
        }
        if self.pairs.is_empty() {
            return Err(Error::InvalidArgument("plan needs at least one pair".into()));
        }
        if self.checkpoint_interval == Some(0) {
            return Err(Error::InvalidArgument("checkpoint interval must be >= 1".into()));
        }
        Ok(())
    }

    /// Total gradient steps this plan executes.
    pub fn executed_steps(&self) -> usize {
        match self.budget {
            RetrainBudget::SplitTotal => self.total_steps,
            RetrainBudget::PerPair => self.total_steps * self.pairs.len(),
        }
    }

    /// Steps allotted to each pair: `floor(S/k)` or `ceil(S/k)`, earlier
    /// pairs taking the remainder.
    pub fn steps_per_pair(&self) -> Vec<usize> {
        let k = self.pairs.len();
        let total = self.executed_steps();
        (0..k)
            .map(|p| total / k + usize::from(p < total % k))
            .collect()
    }

    /// Pair index used at each step.
    pub fn schedule(&self) -> Vec<usize> {
        let k = self.pairs.len();
        let total = self.executed_steps();
        match self.interleave {
            Interleave::AlternateBatches => (0..total).map(|t| t % k).collect(),
            Interleave::SequentialHalves => self
                .steps_per_pair()
                .iter()
                .enumerate()
                .flat_map(|(p, &n)| std::iter::repeat_n(p, n))
                .collect(),
        }
    }
}

/// Checkpoint callback: `(steps completed in this call, current transformer)`.
pub type Observer<'o> = dyn FnMut(usize, &ReversibleTransformer) -> Result<()> + 'o;

pub trait Trainer: Send + Sync {
    fn train(
        &self,
        phi: ReversibleTransformer,
        plan: &TrainPlan<'_>,
        observer: Option<&mut Observer<'_>>,
    ) -> Result<ReversibleTransformer>;
}

/// Full-batch Adam on the cycle + moment objective in the module's frame,
/// with a cosine step-size decay over each training call. Parameters are
/// warm-started; optimizer state is not carried between calls.
#[derive(Debug, Clone, Copy, Default)]
pub struct MomentMatchingTrainer;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Fits the frame of a never-trained module on the plan's datasets and
/// rewrites both maps in it. Each map is centered on the mean of its first
/// input and its bias shifted so that mean lands on the first pair's other
/// mean. Factored weights keep their factor, so the positive semidefinite
/// constraint stays in feature coordinates.
fn establish_frame(phi: &mut ReversibleTransformer, plan: &TrainPlan<'_>) -> Result<()> {
    let mut distinct: Vec<&StageDataset> = Vec::new();
    for (s, t) in &plan.pairs {
        for ds in [*s, *t] {
            if !distinct.iter().any(|seen| std::ptr::eq(*seen, ds)) {
                distinct.push(ds);
            }
        }
    }
    let matrices = distinct
        .iter()
        .map(|ds| ds.to_matrix())
        .collect::<Result<Vec<_>>>()?;
    let frame = Frame::fit(&matrices.iter().collect::<Vec<_>>())?;
    let (source, target) = plan.pairs[0];
    let source_mean = column_means(&frame.encode_matrix(&source.to_matrix()?));
    let target_mean = column_means(&frame.encode_matrix(&target.to_matrix()?));
    for (map, from, to) in [
        (&mut phi.forward, &source_mean, &target_mean),
        (&mut phi.backward, &target_mean, &source_mean),
    ] {
        move_into_frame(map, &frame, from.clone());
        // Start with the first pair's means already matched.
        let reached = DVector::from_vec(map.apply(from.as_slice()));
        map.bias += to - reached;
    }
    phi.frame = Some(frame);
    Ok(())
}

/// `F~(z) = A (F(U z + o) - o)` for a map `F` in feature coordinates.
fn move_into_frame(map: &mut StageMap, frame: &Frame, center: DVector<f64>) {
    let (a, u, o) = (&frame.whiten, &frame.unwhiten, &frame.origin);
    let w = map.effective_weight();
    let k = u * &center + o - &map.center;
    map.bias = a * (&w * &k + &map.bias - o);
    if map.factored {
        map.basis = Some((a.clone(), u.clone()));
    } else {
        map.weight = a * w * u;
    }
    if let Some(h) = map.hidden.as_mut() {
        h.offset += &h.input * &k;
        h.input = &h.input * u;
        h.output = a * &h.output;
    }
    map.center = center;
}

impl Trainer for MomentMatchingTrainer {
    fn train(
        &self,
        mut phi: ReversibleTransformer,
        plan: &TrainPlan<'_>,
        mut observer: Option<&mut Observer<'_>>,
    ) -> Result<ReversibleTransformer> {
        plan.validate()?;
        let d = phi.dim();
        for (s, t) in &plan.pairs {
            for ds in [s, t] {
                let got = ds.dim().ok_or(Error::EmptyDataset)?;
                if got != d {
                    return Err(Error::DimensionMismatch { expected: d, got });
                }
            }
        }
        if phi.frame.is_none() {
            establish_frame(&mut phi, plan)?;
        }
        let frame = phi.frame.clone().expect("frame established");
        if frame.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: frame.dim(),
            });
        }
        let pairs = plan
            .pairs
            .iter()
            .map(|(s, t)| {
                Ok(PairMoments::new(
                    frame.encode_matrix(&s.to_matrix()?),
                    frame.encode_matrix(&t.to_matrix()?),
                ))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut forward = phi.forward.clone();
        let mut backward = phi.backward.clone();
        let n_fw = forward.n_params();
        let mut params: Vec<f64> = forward.flatten();
        params.extend(backward.flatten());
        let mut m = vec![0.0; params.len()];
        let mut v = vec![0.0; params.len()];

        let schedule = plan.schedule();
        let total = schedule.len();
        let base_steps = phi.trained_steps;
        for (t, &pair_idx) in schedule.iter().enumerate() {
            let (terms, g_fw, g_bw) =
                pair_objective_grad(&forward, &backward, &pairs[pair_idx], plan.weights);
            if !terms.total.is_finite() {
                return Err(Error::Diverged {
                    step: base_steps + t,
                    value: terms.total,
                });
            }
            let grads = g_fw.flatten().into_iter().chain(g_bw.flatten());
            let lr = plan.learning_rate
                * 0.5
                * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos());
            let step = (t + 1) as i32;
            let bias1 = 1.0 - BETA1.powi(step);
            let bias2 = 1.0 - BETA2.powi(step);
            for (i, g) in grads.enumerate() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
            forward.unflatten(&params[..n_fw]);
            backward.unflatten(&params[n_fw..]);
            if !forward.is_finite() || !backward.is_finite() {
                return Err(Error::Diverged {
                    step: base_steps + t,
                    value: f64::NAN,
                });
            }
            if let (Some(obs), Some(every)) = (observer.as_mut(), plan.checkpoint_interval) {
                if (t + 1) % every == 0 {
                    let snapshot = ReversibleTransformer {
                        frame: phi.frame.clone(),
                        forward: forward.clone(),
                        backward: backward.clone(),
                        trained_steps: base_steps + t + 1,
                        provenance: phi.provenance.clone(),
                    };
                    obs(t + 1, &snapshot)?;
                }
            }
        }

        phi.forward = forward;
        phi.backward = backward;
        for ((s, t), steps) in plan.pairs.iter().zip(plan.steps_per_pair()) {
            phi.provenance.push(ProvenanceRecord {
                source_stage: s.stage_index,
                target_stage: t.stage_index,
                steps,
            });
        }
        phi.trained_steps += total;
        Ok(phi)
    }
}

/// Trains with the bundled [`MomentMatchingTrainer`].
pub fn train(phi: ReversibleTransformer, plan: &TrainPlan<'_>) -> Result<ReversibleTransformer> {
    MomentMatchingTrainer.train(phi, plan, None)
}
