//! Shared data types: samples, stage datasets, domain sequences and the run
//! configuration consumed by the chain orchestrator.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transformer::TrainerSettings;

/// One observation: a finite feature vector of the run-wide dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    features: Vec<f64>,
}

impl Sample {
    pub fn new(features: Vec<f64>) -> Result<Self> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample features"));
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn into_features(self) -> Vec<f64> {
        self.features
    }
}

/// Unpaired samples of one developmental stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageDataset {
    pub stage_index: usize,
    pub samples: Vec<Sample>,
    pub target_mean_age: f64,
}

impl StageDataset {
    pub fn new(stage_index: usize, samples: Vec<Sample>, target_mean_age: f64) -> Self {
        Self {
            stage_index,
            samples,
            target_mean_age,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Dimension of the first sample, if any.
    pub fn dim(&self) -> Option<usize> {
        self.samples.first().map(Sample::dim)
    }

    /// Row-per-sample matrix. Fails on empty or ragged datasets.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        let d = self.dim().ok_or(Error::EmptyDataset)?;
        for s in &self.samples {
            if s.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: s.dim(),
                });
            }
        }
        Ok(DMatrix::from_fn(self.samples.len(), d, |r, c| {
            self.samples[r].features[c]
        }))
    }
}

/// Ordered stages `1..=N_D` sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSequence {
    stages: Vec<StageDataset>,
    dimension: usize,
}

impl DomainSequence {
    /// Builds a sequence and validates it.
    pub fn new(stages: Vec<StageDataset>, dimension: usize) -> Result<Self> {
        let seq = Self { stages, dimension };
        let report = validate_sequence(&seq);
        if report.is_ok() {
            Ok(seq)
        } else {
            Err(Error::Validation(report))
        }
    }

    /// Builds a sequence without validating it. Use [`validate_sequence`]
    /// before handing it to anything that relies on the invariants.
    pub fn new_unchecked(stages: Vec<StageDataset>, dimension: usize) -> Self {
        Self { stages, dimension }
    }

    /// The same stages oldest first, renumbered from 1. Used for runs in
    /// backward mode; target means come out decreasing.
    pub fn reversed(&self) -> Self {
        let n = self.stages.len();
        let stages = self
            .stages
            .iter()
            .rev()
            .map(|st| StageDataset {
                stage_index: n + 1 - st.stage_index,
                ..st.clone()
            })
            .collect();
        Self {
            stages,
            dimension: self.dimension,
        }
    }

    pub fn stages(&self) -> &[StageDataset] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut Vec<StageDataset> {
        &mut self.stages
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// 1-based stage access.
    pub fn stage(&self, index: usize) -> Result<&StageDataset> {
        if index == 0 || index > self.stages.len() {
            return Err(Error::StageOutOfRange {
                stage: index,
                n_stages: self.stages.len(),
            });
        }
        Ok(&self.stages[index - 1])
    }

    pub fn target_means(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.target_mean_age).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    TooFewStages { n_stages: usize },
    StageIndex { position: usize, found: usize },
    EmptyStage { stage: usize },
    DimensionMismatch {
        stage: usize,
        row: usize,
        expected: usize,
        got: usize,
    },
    NonFiniteFeature { stage: usize, row: usize },
    NonFiniteTarget { stage: usize },
    NonMonotoneTargets { stage: usize, previous: f64, current: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooFewStages { n_stages } => {
                write!(f, "N_D >= 3 required, got {n_stages} stages")
            }
            Violation::StageIndex { position, found } => {
                write!(f, "stage at position {position} has index {found}")
            }
            Violation::EmptyStage { stage } => write!(f, "stage {stage} is empty"),
            Violation::DimensionMismatch {
                stage,
                row,
                expected,
                got,
            } => write!(
                f,
                "dimension mismatch in stage {stage} row {row}: expected {expected}, got {got}"
            ),
            Violation::NonFiniteFeature { stage, row } => {
                write!(f, "non-finite feature in stage {stage} row {row}")
            }
            Violation::NonFiniteTarget { stage } => {
                write!(f, "non-finite target mean age in stage {stage}")
            }
            Violation::NonMonotoneTargets {
                stage,
                previous,
                current,
            } => write!(
                f,
                "non-monotone target means at stage {stage}: {current} does not exceed {previous}"
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks every structural invariant of a sequence and reports all
/// violations found rather than stopping at the first.
pub fn validate_sequence(seq: &DomainSequence) -> ValidationReport {
    let mut violations = Vec::new();
    if seq.stages.len() < 3 {
        violations.push(Violation::TooFewStages {
            n_stages: seq.stages.len(),
        });
    }
    let mut previous: Option<f64> = None;
    for (pos, stage) in seq.stages.iter().enumerate() {
        let expected_index = pos + 1;
        if stage.stage_index != expected_index {
            violations.push(Violation::StageIndex {
                position: expected_index,
                found: stage.stage_index,
            });
        }
        if stage.samples.is_empty() {
            violations.push(Violation::EmptyStage {
                stage: expected_index,
            });
        }
        for (row, s) in stage.samples.iter().enumerate() {
            if s.dim() != seq.dimension {
                violations.push(Violation::DimensionMismatch {
                    stage: expected_index,
                    row,
                    expected: seq.dimension,
                    got: s.dim(),
                });
            } else if s.features.iter().any(|v| !v.is_finite()) {
                violations.push(Violation::NonFiniteFeature {
                    stage: expected_index,
                    row,
                });
            }
        }
        if !stage.target_mean_age.is_finite() {
            violations.push(Violation::NonFiniteTarget {
                stage: expected_index,
            });
        } else {
            if let Some(prev) = previous {
                if stage.target_mean_age <= prev {
                    violations.push(Violation::NonMonotoneTargets {
                        stage: expected_index,
                        previous: prev,
                        current: stage.target_mean_age,
                    });
                }
            }
            previous = Some(stage.target_mean_age);
        }
    }
    ValidationReport { violations }
}

/// How the baseline and recycled scores are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionMode {
    /// Recycled wins iff `|E - E'| < epsilon`.
    TwoSided,
    /// Recycled wins iff `E' - E < epsilon`.
    OneSided,
}

impl DecisionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DecisionMode::TwoSided => "two_sided",
            DecisionMode::OneSided => "one_sided",
        }
    }

    /// `true` when the recycled model wins against the baseline.
    pub fn recycled_wins(self, e_baseline: f64, e_recycled: f64, epsilon: f64) -> bool {
        match self {
            DecisionMode::TwoSided => (e_baseline - e_recycled).abs() < epsilon,
            DecisionMode::OneSided => e_recycled - e_baseline < epsilon,
        }
    }
}

impl std::str::FromStr for DecisionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_sided" | "two-sided" => Ok(DecisionMode::TwoSided),
            "one_sided" | "one-sided" => Ok(DecisionMode::OneSided),
            other => Err(Error::InvalidArgument(format!(
                "unknown decision mode `{other}`"
            ))),
        }
    }
}

impl fmt::Display for DecisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which way the greedy chain walks the stages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainDirection {
    /// Youngest stage first; slot maps age their input.
    #[default]
    Forward,
    /// Oldest stage first; slot maps make their input younger.
    Backward,
}

impl ChainDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            ChainDirection::Forward => "forward",
            ChainDirection::Backward => "backward",
        }
    }
}

impl std::str::FromStr for ChainDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(ChainDirection::Forward),
            "backward" => Ok(ChainDirection::Backward),
            other => Err(Error::InvalidArgument(format!(
                "unknown chain direction `{other}`"
            ))),
        }
    }
}

impl fmt::Display for ChainDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Configuration of one greedy chain run.
///
/// `Default` carries the reference values `N_D = 6`, targets
/// `15, 25, ..., 65`, `S = 600_000`, `epsilon = 0.1`. The step count is far
/// beyond what the moment-matching trainer needs; the bundled demo configs
/// use a few thousand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_stages: usize,
    pub target_means: Vec<f64>,
    pub steps: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub sigma_floor: f64,
    pub decision_mode: DecisionMode,
    /// `target_means` stay increasing either way; a backward run walks
    /// them from the last.
    pub direction: ChainDirection,
    pub trainer: TrainerSettings,
    /// Score the module under training every this many steps.
    pub checkpoint_interval: Option<usize>,
    /// Cap on how many extra slots one module may cover.
    pub max_reuses: Option<usize>,
    /// Reject a recycled module whose score on its earliest pair exceeds this.
    pub max_forgetting_error: Option<f64>,
    pub parallel_baselines: bool,
    /// Keep released modules in the chain state for auditing.
    pub archive_released: bool,
    /// Ridge strength of the auxiliary age estimator.
    pub ridge: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_stages: 6,
            target_means: vec![15.0, 25.0, 35.0, 45.0, 55.0, 65.0],
            steps: 600_000,
            epsilon: 0.1,
            seed: 0,
            sigma_floor: 1e-6,
            decision_mode: DecisionMode::OneSided,
            direction: ChainDirection::Forward,
            trainer: TrainerSettings::default(),
            checkpoint_interval: None,
            max_reuses: None,
            max_forgetting_error: None,
            parallel_baselines: true,
            archive_released: false,
            ridge: 1e-6,
        }
    }
}

impl RunConfig {
    /// Target means in the order the run visits the stages.
    pub fn run_target_means(&self) -> Vec<f64> {
        match self.direction {
            ChainDirection::Forward => self.target_means.clone(),
            ChainDirection::Backward => self.target_means.iter().rev().copied().collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_stages < 3 {
            return bad(format!("n_stages must be >= 3, got {}", self.n_stages));
        }
        if self.target_means.len() != self.n_stages {
            return bad(format!(
                "target_means has {} entries, n_stages is {}",
                self.target_means.len(),
                self.n_stages
            ));
        }
        if self.target_means.iter().any(|m| !m.is_finite())
            || self.target_means.windows(2).any(|w| w[1] <= w[0])
        {
            return bad("target_means must be finite and strictly increasing".into());
        }
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        // +inf is a legal sentinel for "always reuse".
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if !(self.sigma_floor > 0.0) || !self.sigma_floor.is_finite() {
            return bad(format!("sigma_floor must be > 0, got {}", self.sigma_floor));
        }
        if self.checkpoint_interval == Some(0) {
            return bad("checkpoint_interval must be >= 1".into());
        }
        if self.max_forgetting_error.is_some_and(f64::is_nan) {
            return bad("max_forgetting_error must not be NaN".into());
        }
        if !(self.ridge >= 0.0) {
            return bad(format!("ridge must be >= 0, got {}", self.ridge));
        }
        self.trainer.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stage(index: usize, n: usize, d: usize, target: f64) -> StageDataset {
        let samples = (0..n)
            .map(|r| Sample::new((0..d).map(|c| (r * d + c) as f64).collect()).unwrap())
            .collect();
        StageDataset::new(index, samples, target)
    }

    fn valid_sequence() -> DomainSequence {
        let targets = [15.0, 25.0, 35.0, 45.0, 55.0, 65.0];
        let stages = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| stage(i + 1, 4, 8, t))
            .collect();
        DomainSequence::new_unchecked(stages, 8)
    }

    #[test]
    fn six_stage_sequence_is_ok() {
        let report = validate_sequence(&valid_sequence());
        assert!(report.is_ok(), "{report}");
    }

    #[test]
    fn two_stages_rejected() {
        let mut seq = valid_sequence();
        seq.stages_mut().truncate(2);
        let report = validate_sequence(&seq);
        assert_eq!(
            report.violations,
            vec![Violation::TooFewStages { n_stages: 2 }]
        );
        assert!(report.to_string().contains("N_D >= 3"));
    }

    #[test]
    fn ragged_sample_reported() {
        let mut seq = valid_sequence();
        seq.stages_mut()[2].samples[1] = Sample::new(vec![0.0; 7]).unwrap();
        let report = validate_sequence(&seq);
        assert_eq!(
            report.violations,
            vec![Violation::DimensionMismatch {
                stage: 3,
                row: 1,
                expected: 8,
                got: 7
            }]
        );
        assert!(report.to_string().contains("dimension mismatch"));
    }

    #[test]
    fn non_monotone_and_empty_reported_together() {
        let mut seq = valid_sequence();
        seq.stages_mut()[3].target_mean_age = 30.0;
        seq.stages_mut()[5].samples.clear();
        let report = validate_sequence(&seq);
        assert!(report
            .violations
            .contains(&Violation::EmptyStage { stage: 6 }));
        assert!(report.violations.iter().any(|v| matches!(
            v,
            Violation::NonMonotoneTargets { stage: 4, .. }
        )));
    }

    #[test]
    fn non_finite_sample_rejected_at_construction() {
        assert!(Sample::new(vec![1.0, f64::NAN]).is_err());
        assert!(Sample::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn decision_rules() {
        let two = DecisionMode::TwoSided;
        let one = DecisionMode::OneSided;
        assert!(two.recycled_wins(1.0, 1.05, 0.1));
        // much better recycled model is rejected by the literal rule
        assert!(!two.recycled_wins(1.0, 0.5, 0.1));
        assert!(one.recycled_wins(1.0, 0.5, 0.1));
        assert!(!one.recycled_wins(1.0, 1.2, 0.1));
        assert!(!two.recycled_wins(1.0, 1.0, 0.0));
        assert!(two.recycled_wins(1.0, 7.0, f64::INFINITY));
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.n_stages, 6);
        assert_eq!(cfg.steps, 600_000);
        assert_eq!(cfg.epsilon, 0.1);
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.steps = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.target_means[2] = 20.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.sigma_floor = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.epsilon = f64::INFINITY;
        assert!(cfg.validate().is_ok());
    }
}
