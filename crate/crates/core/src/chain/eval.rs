//! Reached-age table on held-out stages.

use super::{ChainState, ModuleId};
use crate::domain::{ChainDirection, DomainSequence, Sample, StageDataset};
use crate::error::{Error, Result};
use crate::scorer::{score_ages, AgeEstimator};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "forward" => Some(Direction::Forward),
            "backward" => Some(Direction::Backward),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    /// One slot's map applied to one start stage.
    Hop,
    /// Slot maps composed from the first (or last) stage.
    Chain,
}

impl RowKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RowKind::Hop => "hop",
            RowKind::Chain => "chain",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hop" => Some(RowKind::Hop),
            "chain" => Some(RowKind::Chain),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub direction: Direction,
    pub kind: RowKind,
    /// `None` for composed rows.
    pub module: Option<ModuleId>,
    pub slot: Option<usize>,
    pub start_stage: usize,
    pub end_stage: usize,
    /// Mean estimated age of the untransformed input.
    pub input_mean_age: f64,
    pub target: f64,
    pub reached_mean: f64,
    pub reached_std: f64,
    pub mean_abs_error: f64,
    /// Whether the slot is the one the chain actually uses for this stage.
    pub in_chain: bool,
}

impl EvalRow {
    pub fn offset(&self) -> f64 {
        self.reached_mean - self.target
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvaluationTable {
    pub rows: Vec<EvalRow>,
}

impl EvaluationTable {
    /// Hop rows the chain uses: slot `j` on stage `j` forward, on stage
    /// `j + 1` backward.
    pub fn in_chain_hops(&self, direction: Direction) -> impl Iterator<Item = &EvalRow> {
        self.rows
            .iter()
            .filter(move |r| r.kind == RowKind::Hop && r.in_chain && r.direction == direction)
    }

    pub fn chain_rows(&self, direction: Direction) -> impl Iterator<Item = &EvalRow> {
        self.rows
            .iter()
            .filter(move |r| r.kind == RowKind::Chain && r.direction == direction)
    }
}

fn estimate_all(samples: &[Sample], gamma: &AgeEstimator) -> Result<Vec<f64>> {
    samples.iter().map(|s| gamma.estimate(s)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct RowSpec {
    direction: Direction,
    kind: RowKind,
    module: Option<ModuleId>,
    slot: Option<usize>,
    start_stage: usize,
    end_stage: usize,
    target: f64,
    in_chain: bool,
}

fn row(
    spec: RowSpec,
    input: &StageDataset,
    outputs: &[Sample],
    gamma: &AgeEstimator,
    floor: f64,
) -> Result<EvalRow> {
    let input_mean_age = mean(&estimate_all(&input.samples, gamma)?);
    let r = score_ages(&estimate_all(outputs, gamma)?, spec.target, floor)?;
    Ok(EvalRow {
        direction: spec.direction,
        kind: spec.kind,
        module: spec.module,
        slot: spec.slot,
        start_stage: spec.start_stage,
        end_stage: spec.end_stage,
        input_mean_age,
        target: spec.target,
        reached_mean: r.mean_age,
        reached_std: r.std_dev,
        mean_abs_error: r.mean_abs_error,
        in_chain: spec.in_chain,
    })
}

/// Applies every slot to every validation stage in both directions, plus the
/// composed chain from stage 1 upward and from stage `N_D` downward.
/// `validation` is given youngest first; for a backward chain it is
/// reversed and rows use the chain's run-order stage numbers.
///
/// A hop row's target is the start stage's target shifted by the slot's
/// target spacing.
pub fn evaluate_chain(
    chain: &ChainState,
    validation: &DomainSequence,
    gamma: &AgeEstimator,
) -> Result<EvaluationTable> {
    let reversed;
    let validation = match chain.config.direction {
        ChainDirection::Forward => validation,
        ChainDirection::Backward => {
            reversed = validation.reversed();
            &reversed
        }
    };
    let n = chain.n_stages();
    if validation.n_stages() != n || validation.target_means() != chain.target_means {
        return Err(Error::InvalidArgument(
            "validation stages must align with the chain's stage targets".into(),
        ));
    }
    let d = chain.slot_module(1)?.transformer.dim();
    if validation.dimension() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: validation.dimension(),
        });
    }
    let mu = &chain.target_means;
    let floor = chain.config.sigma_floor;
    let mut rows = Vec::new();

    for slot in 1..n {
        let m = chain.slot_module(slot)?;
        let delta = mu[slot] - mu[slot - 1];
        for start in 1..=n {
            let input = validation.stage(start)?;
            for direction in [Direction::Forward, Direction::Backward] {
                let (outputs, target, in_chain) = match direction {
                    Direction::Forward => (
                        input
                            .samples
                            .iter()
                            .map(|s| m.transformer.apply_forward(s))
                            .collect::<Result<Vec<_>>>()?,
                        mu[start - 1] + delta,
                        start == slot,
                    ),
                    Direction::Backward => (
                        input
                            .samples
                            .iter()
                            .map(|s| m.transformer.apply_backward(s))
                            .collect::<Result<Vec<_>>>()?,
                        mu[start - 1] - delta,
                        start == slot + 1,
                    ),
                };
                let end_stage = if in_chain {
                    match direction {
                        Direction::Forward => start + 1,
                        Direction::Backward => start - 1,
                    }
                } else {
                    start
                };
                rows.push(row(
                    RowSpec {
                        direction,
                        kind: RowKind::Hop,
                        module: Some(m.id),
                        slot: Some(slot),
                        start_stage: start,
                        end_stage,
                        target,
                        in_chain,
                    },
                    input,
                    &outputs,
                    gamma,
                    floor,
                )?);
            }
        }
    }

    for (direction, start) in [(Direction::Forward, 1), (Direction::Backward, n)] {
        let input = validation.stage(start)?;
        let mut current = input.samples.clone();
        let ends: Vec<usize> = match direction {
            Direction::Forward => (2..=n).collect(),
            Direction::Backward => (1..n).rev().collect(),
        };
        let mut at = start;
        for end in ends {
            current = current
                .iter()
                .map(|s| chain.transform_to_stage(s, at, end))
                .collect::<Result<Vec<_>>>()?;
            at = end;
            rows.push(row(
                RowSpec {
                    direction,
                    kind: RowKind::Chain,
                    module: None,
                    slot: None,
                    start_stage: start,
                    end_stage: end,
                    target: mu[end - 1],
                    in_chain: true,
                },
                input,
                &current,
                gamma,
                floor,
            )?);
        }
    }
    Ok(EvaluationTable { rows })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use nalgebra::DVector;

    use super::*;
    use crate::chain::ChainModule;
    use crate::domain::RunConfig;
    use crate::scorer::FitRecord;
    use crate::transformer::{init_transformer, InitMode, TrainerSettings};

    #[test]
    fn identity_chain_reaches_source_age() {
        let targets = vec![15.0, 25.0, 35.0];
        let t = init_transformer(1, InitMode::Identity, &TrainerSettings::default(), 0).unwrap();
        let mut modules = BTreeMap::new();
        for id in [1, 2] {
            modules.insert(
                id,
                ChainModule {
                    id,
                    transformer: t.clone(),
                    origin: (id, id + 1),
                },
            );
        }
        let chain = ChainState {
            target_means: targets.clone(),
            modules,
            slots: vec![1, 2],
            reuse_index: 2,
            decision_log: Vec::new(),
            config: RunConfig {
                n_stages: 3,
                target_means: targets.clone(),
                ..RunConfig::default()
            },
            curves: Vec::new(),
            archive: Vec::new(),
        };
        let stages = targets
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let s = [m - 2.0, m, m + 2.0]
                    .iter()
                    .map(|&a| Sample::new(vec![a]).unwrap())
                    .collect();
                StageDataset::new(i + 1, s, m)
            })
            .collect();
        let val = DomainSequence::new(stages, 1).unwrap();
        let gamma = AgeEstimator {
            weights: DVector::from_vec(vec![1.0]),
            bias: 0.0,
            ridge: 0.0,
            record: FitRecord::default(),
        };
        let table = evaluate_chain(&chain, &val, &gamma).unwrap();
        // 2 slots x 3 stages x 2 directions + 2 composed rows each way
        assert_eq!(table.rows.len(), 16);
        for r in &table.rows {
            let source = targets[r.start_stage - 1];
            assert!((r.reached_mean - source).abs() < 1e-12);
            assert!((r.input_mean_age - source).abs() < 1e-12);
        }
        assert_eq!(table.in_chain_hops(Direction::Forward).count(), 2);
        assert_eq!(table.in_chain_hops(Direction::Backward).count(), 2);
    }
}
