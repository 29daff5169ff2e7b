//! Reversible stage-to-stage transformers.
//!
//! A [`ReversibleTransformer`] holds a forward map `F` (stage `i` to `i+1`)
//! and a backward map `G` (stage `i+1` to `i`). The bundled trainer fits both
//! with cycle consistency plus first/second moment matching; anything else
//! implementing [`Trainer`] can be slotted in instead.
//!
//! With `factored_weight` enabled (the default) the linear part of each map
//! is `W = exp(S)` for symmetric `S`. Moment matching alone only fixes `W` up to an orthogonal
//! factor, and symmetry alone still admits reflected roots; the positive
//! definite solution is unique and coincides with the optimal-transport map
//! between Gaussian moments.

mod frame;
mod map;
pub mod objective;
mod train;

use serde::{Deserialize, Serialize};

pub use frame::Frame;
pub use map::{HiddenLayer, StageMap};
pub use objective::{LossWeights, ObjectiveTerms, PairMoments};
pub use train::{train, MomentMatchingTrainer, Observer, TrainPlan, Trainer};

use nalgebra::{DMatrix, DVector};

use crate::domain::{Sample, StageDataset};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Identity,
    SeededRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interleave {
    /// Round-robin over pairs, one full-batch step each.
    AlternateBatches,
    /// All steps of pair 1, then all steps of pair 2, ...
    SequentialHalves,
}

/// How a multi-pair plan spends its step budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainBudget {
    /// `S` steps in total, split across pairs.
    SplitTotal,
    /// `S` steps for every pair.
    PerPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSettings {
    pub learning_rate: f64,
    pub lambda_cycle: f64,
    pub lambda_dist: f64,
    pub interleave: Interleave,
    pub budget: RetrainBudget,
    /// Width of the residual `tanh` layer; 0 keeps the maps affine.
    pub hidden_width: usize,
    pub factored_weight: bool,
    pub init_mode: InitMode,
    pub init_scale: f64,
}

impl Default for TrainerSettings {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            lambda_cycle: 10.0,
            lambda_dist: 1.0,
            interleave: Interleave::AlternateBatches,
            budget: RetrainBudget::SplitTotal,
            hidden_width: 0,
            factored_weight: true,
            init_mode: InitMode::SeededRandom,
            init_scale: 0.01,
        }
    }
}

impl TrainerSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be > 0, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        if !(self.lambda_cycle >= 0.0 && self.lambda_dist >= 0.0)
            || self.lambda_cycle + self.lambda_dist == 0.0
        {
            return Err(Error::InvalidArgument(
                "loss weights must be non-negative and not both zero".into(),
            ));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::InvalidArgument("init_scale must be >= 0".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            cycle: self.lambda_cycle,
            dist: self.lambda_dist,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProvenanceRecord {
    pub source_stage: usize,
    pub target_stage: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReversibleTransformer {
    /// Maps act on frame coordinates. Unset until the first training call,
    /// which fits it and reinterprets the initial parameters in it.
    pub frame: Option<Frame>,
    pub forward: StageMap,
    pub backward: StageMap,
    pub trained_steps: usize,
    pub provenance: Vec<ProvenanceRecord>,
}

/// Fresh transformer. `Identity` gives `F(x) = G(x) = x` exactly;
/// `SeededRandom` perturbs the identity by at most `init_scale` per entry.
pub fn init_transformer(
    d: usize,
    mode: InitMode,
    settings: &TrainerSettings,
    seed: u64,
) -> Result<ReversibleTransformer> {
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be >= 1".into()));
    }
    let mut rng = seed::rng(seed, "init");
    let perturb = mode == InitMode::SeededRandom;
    let mut make = || {
        StageMap::perturbed_identity(
            d,
            settings.hidden_width,
            settings.factored_weight,
            settings.init_scale,
            perturb,
            &mut rng,
        )
    };
    let forward = make();
    let backward = make();
    Ok(ReversibleTransformer {
        frame: None,
        forward,
        backward,
        trained_steps: 0,
        provenance: Vec::new(),
    })
}

impl ReversibleTransformer {
    pub fn dim(&self) -> usize {
        self.forward.dim()
    }

    /// Deep copy; training the copy never touches `self`.
    pub fn copy(&self) -> Self {
        self.clone()
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }

    fn apply_map(&self, map: &StageMap, s: &Sample) -> Result<Sample> {
        self.check_dim(s.dim())?;
        match &self.frame {
            None => Sample::new(map.apply(s.features())),
            Some(f) => Sample::new(f.decode(&map.apply(&f.encode(s.features())))),
        }
    }

    pub fn apply_forward(&self, s: &Sample) -> Result<Sample> {
        self.apply_map(&self.forward, s)
    }

    pub fn apply_backward(&self, s: &Sample) -> Result<Sample> {
        self.apply_map(&self.backward, s)
    }

    fn affine_of(&self, map: &StageMap) -> (DMatrix<f64>, DVector<f64>) {
        let (w, c) = map.affine_part();
        match &self.frame {
            None => (w, c),
            Some(f) => {
                let w_raw = &f.unwhiten * &w * &f.whiten;
                let c_raw = &f.unwhiten * (c - &w * &f.whiten * &f.origin) + &f.origin;
                (w_raw, c_raw)
            }
        }
    }

    /// Forward map as `x -> W x + c` in feature coordinates, hidden layer
    /// ignored (exact for affine transformers).
    pub fn forward_affine(&self) -> (DMatrix<f64>, DVector<f64>) {
        self.affine_of(&self.forward)
    }

    /// Backward counterpart of [`ReversibleTransformer::forward_affine`].
    pub fn backward_affine(&self) -> (DMatrix<f64>, DVector<f64>) {
        self.affine_of(&self.backward)
    }

    /// `|G(F(x)) - x|_1 / d` for one sample.
    pub fn cycle_residual(&self, s: &Sample) -> Result<f64> {
        let back = self.apply_backward(&self.apply_forward(s)?)?;
        let d = s.dim() as f64;
        Ok(back
            .features()
            .iter()
            .zip(s.features())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / d)
    }

    /// Mean of [`ReversibleTransformer::cycle_residual`] over the dataset.
    pub fn cycle_loss(&self, dataset: &StageDataset) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut total = 0.0;
        for s in &dataset.samples {
            total += self.cycle_residual(s)?;
        }
        Ok(total / dataset.len() as f64)
    }

    /// `|mean F(source) - mean target|^2 + |cov F(source) - cov target|_F^2`.
    pub fn dist_loss(&self, source: &StageDataset, target: &StageDataset) -> Result<f64> {
        let y = target.to_matrix()?;
        self.check_dim(source.dim().ok_or(Error::EmptyDataset)?)?;
        self.check_dim(y.ncols())?;
        let mapped = source
            .samples
            .iter()
            .map(|s| self.apply_forward(s))
            .collect::<Result<Vec<_>>>()?;
        let fx = StageDataset::new(target.stage_index, mapped, target.target_mean_age).to_matrix()?;
        let (value, _) = objective::moment_distance(
            &fx,
            &crate::linalg::column_means(&y),
            &crate::linalg::covariance(&y),
        );
        Ok(value)
    }
}
