//! Greedy forward-mode recursive transformer chain.
//!
//! One baseline transformer is trained per adjacent stage pair. Walking the
//! chain from stage 2, a copy of the current re-use candidate is co-trained
//! on its previous pair plus the next pair; if the estimator scores it no
//! worse (per [`DecisionMode`]) than the fresh baseline, the copy replaces
//! both and stays the candidate, otherwise the baseline becomes the next
//! candidate. Only the immediately previous pair is revisited, so forgetting
//! is prevented over two steps and no further.

mod descriptor;
mod eval;

use std::collections::BTreeMap;

use rayon::prelude::*;

pub use descriptor::{format_age, Descriptor, DescriptorTerm};
pub use eval::{evaluate_chain, Direction, EvalRow, EvaluationTable, RowKind};

use crate::domain::{
    validate_sequence, ChainDirection, DecisionMode, DomainSequence, RunConfig, Sample,
};
use crate::error::{Error, Result};
use crate::scorer::{score_error, AgeEstimator, ScoreReport};
use crate::seed;
use crate::transformer::{
    init_transformer, MomentMatchingTrainer, ReversibleTransformer, TrainPlan, Trainer,
};

pub type ModuleId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct ChainModule {
    pub id: ModuleId,
    pub transformer: ReversibleTransformer,
    /// Stage pair the module was first trained on.
    pub origin: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    /// The recycled copy replaced the baseline.
    Recycled,
    /// The baseline was kept.
    Baseline,
    /// Candidate already at `max_reuses`; no copy was trained.
    Capped,
    /// The copy won on score but forgot its earliest pair.
    Forgetting,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Recycled => "recycled",
            Outcome::Baseline => "baseline",
            Outcome::Capped => "capped",
            Outcome::Forgetting => "forgetting",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "recycled" => Outcome::Recycled,
            "baseline" => Outcome::Baseline,
            "capped" => Outcome::Capped,
            "forgetting" => Outcome::Forgetting,
            _ => return None,
        })
    }

    pub fn recycled_won(self) -> bool {
        self == Outcome::Recycled
    }
}

/// One loop iteration of the greedy chain.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub iteration: usize,
    /// Re-use index `a` when the iteration started.
    pub reuse_index: usize,
    pub baseline_module: ModuleId,
    pub recycled_module: Option<ModuleId>,
    pub e_baseline: f64,
    pub e_recycled: Option<f64>,
    pub epsilon: f64,
    pub mode: DecisionMode,
    pub outcome: Outcome,
    pub baseline_sigma_floored: bool,
    pub recycled_sigma_floored: bool,
    pub forgetting_error: Option<f64>,
    pub reuse_index_after: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Baseline,
    Recycled,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Baseline => "baseline",
            Role::Recycled => "recycled",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "baseline" => Some(Role::Baseline),
            "recycled" => Some(Role::Recycled),
            _ => None,
        }
    }
}

/// Score of a module under training at one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub module: ModuleId,
    pub role: Role,
    /// Slot whose transition is being scored (`source -> source + 1`).
    pub slot: usize,
    pub step: usize,
    pub trained_steps: usize,
    pub normalized_error: f64,
    pub mean_age: f64,
    pub std_dev: f64,
    pub mean_abs_error: f64,
}

/// A released module kept for the audit trail.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchivedModule {
    pub module: ChainModule,
    pub iteration: usize,
}

/// A trained chain. Stages, slots and targets are numbered in run order, so
/// in a backward run stage 1 is the oldest stage and slot maps' forward
/// direction makes samples younger.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub target_means: Vec<f64>,
    pub modules: BTreeMap<ModuleId, ChainModule>,
    /// `slots[j - 1]` is the module transforming stage `j` to `j + 1`.
    pub slots: Vec<ModuleId>,
    pub reuse_index: usize,
    pub decision_log: Vec<DecisionRecord>,
    pub config: RunConfig,
    pub curves: Vec<CurvePoint>,
    pub archive: Vec<ArchivedModule>,
}

impl ChainState {
    pub fn n_stages(&self) -> usize {
        self.target_means.len()
    }

    /// Module of 1-based slot `j`.
    pub fn slot_module(&self, slot: usize) -> Result<&ChainModule> {
        let id = self
            .slots
            .get(slot.wrapping_sub(1))
            .ok_or(Error::StageOutOfRange {
                stage: slot,
                n_stages: self.n_stages(),
            })?;
        self.modules
            .get(id)
            .ok_or_else(|| Error::ChainFile(format!("slot {slot} references missing module {id}")))
    }

    /// Number of distinct modules in use.
    pub fn n_modules(&self) -> usize {
        let mut ids = self.slots.clone();
        ids.dedup();
        ids.len()
    }

    /// Structural invariants: slot count, every slot resolvable, shared
    /// modules covering contiguous slot runs, and (for a finished run) one
    /// decision per loop iteration.
    pub fn check_invariants(&self, completed: bool) -> Result<()> {
        let n = self.n_stages();
        let bad = |m: String| Err(Error::ChainFile(m));
        if self.slots.len() + 1 != n {
            return bad(format!("{} slots for {} stages", self.slots.len(), n));
        }
        for (j, id) in self.slots.iter().enumerate() {
            if !self.modules.contains_key(id) {
                return bad(format!("slot {} references missing module {id}", j + 1));
            }
            if let Some(prev) = self.slots[..j].iter().rposition(|p| p == id) {
                if prev + 1 != j {
                    return bad(format!("module {id} covers non-contiguous slots"));
                }
            }
        }
        if completed && self.decision_log.len() + 2 != n {
            return bad(format!(
                "decision log has {} entries, expected {}",
                self.decision_log.len(),
                n - 2
            ));
        }
        Ok(())
    }

    pub fn descriptor(&self) -> Descriptor {
        Descriptor::from_slots(&self.slots, &self.target_means)
    }

    /// Moves a sample from `from_stage` to `to_stage` through the slot maps:
    /// forward maps in slot order when moving up, backward maps in reverse
    /// slot order when moving down.
    pub fn transform_to_stage(&self, s: &Sample, from_stage: usize, to_stage: usize) -> Result<Sample> {
        let n = self.n_stages();
        for stage in [from_stage, to_stage] {
            if stage == 0 || stage > n {
                return Err(Error::StageOutOfRange { stage, n_stages: n });
            }
        }
        let mut x = s.clone();
        if to_stage > from_stage {
            for slot in from_stage..to_stage {
                x = self.slot_module(slot)?.transformer.apply_forward(&x)?;
            }
        } else {
            for slot in (to_stage..from_stage).rev() {
                x = self.slot_module(slot)?.transformer.apply_backward(&x)?;
            }
        }
        Ok(x)
    }

    /// Score-versus-steps series per module, recorded at checkpoints.
    pub fn training_curve(&self) -> Result<BTreeMap<ModuleId, Vec<CurvePoint>>> {
        if self.config.checkpoint_interval.is_none() || self.curves.is_empty() {
            return Err(Error::NoCheckpoints);
        }
        let mut out: BTreeMap<ModuleId, Vec<CurvePoint>> = BTreeMap::new();
        for p in &self.curves {
            out.entry(p.module).or_default().push(p.clone());
        }
        Ok(out)
    }
}

pub fn transform_to_stage(
    chain: &ChainState,
    s: &Sample,
    from_stage: usize,
    to_stage: usize,
) -> Result<Sample> {
    chain.transform_to_stage(s, from_stage, to_stage)
}

pub fn descriptor(chain: &ChainState) -> Descriptor {
    chain.descriptor()
}

pub fn training_curve(chain: &ChainState) -> Result<BTreeMap<ModuleId, Vec<CurvePoint>>> {
    chain.training_curve()
}

/// Runs the greedy chain with the bundled moment-matching trainer.
pub fn run_chain(seq: &DomainSequence, gamma: &AgeEstimator, cfg: &RunConfig) -> Result<ChainState> {
    run_chain_with(seq, gamma, cfg, &MomentMatchingTrainer)
}

fn aborted(iteration: usize, phase: &'static str, source: Error, log: &[DecisionRecord]) -> Error {
    Error::ChainAborted {
        iteration,
        phase,
        source: Box::new(source),
        partial_log: log.to_vec(),
    }
}

struct TrainOutput {
    transformer: ReversibleTransformer,
    curve: Vec<CurvePoint>,
}

/// Trains `phi` on `pairs` (1-based source stages), scoring checkpoints on
/// `slot -> slot + 1`.
#[allow(clippy::too_many_arguments)]
fn train_module(
    trainer: &dyn Trainer,
    phi: ReversibleTransformer,
    seq: &DomainSequence,
    pair_sources: &[usize],
    slot: usize,
    module: ModuleId,
    role: Role,
    gamma: &AgeEstimator,
    cfg: &RunConfig,
    seed_name: &str,
) -> Result<TrainOutput> {
    let pairs = pair_sources
        .iter()
        .map(|&s| Ok((seq.stage(s)?, seq.stage(s + 1)?)))
        .collect::<Result<Vec<_>>>()?;
    let plan = TrainPlan::new(pairs, cfg.steps, &cfg.trainer, seed::substream(cfg.seed, seed_name))
        .with_checkpoints(cfg.checkpoint_interval);
    let source = seq.stage(slot)?;
    let target_mean = cfg.target_means[slot];
    let mut curve = Vec::new();
    let mut observer = |step: usize, t: &ReversibleTransformer| -> Result<()> {
        let r = score_error(t, source, target_mean, gamma, cfg.sigma_floor)?;
        curve.push(CurvePoint {
            module,
            role,
            slot,
            step,
            trained_steps: t.trained_steps,
            normalized_error: r.normalized_error,
            mean_age: r.mean_age,
            std_dev: r.std_dev,
            mean_abs_error: r.mean_abs_error,
        });
        Ok(())
    };
    let transformer = trainer.train(phi, &plan, Some(&mut observer))?;
    Ok(TrainOutput { transformer, curve })
}

/// Runs the greedy chain with any [`Trainer`].
pub fn run_chain_with(
    seq: &DomainSequence,
    gamma: &AgeEstimator,
    cfg: &RunConfig,
    trainer: &dyn Trainer,
) -> Result<ChainState> {
    cfg.validate()?;
    let report = validate_sequence(seq);
    if !report.is_ok() {
        return Err(Error::Validation(report));
    }
    let n = seq.n_stages();
    if n != cfg.n_stages || seq.target_means() != cfg.target_means {
        return Err(Error::InvalidArgument(
            "sequence stages and target means must match the run config".into(),
        ));
    }
    if gamma.dim() != seq.dimension() {
        return Err(Error::DimensionMismatch {
            expected: seq.dimension(),
            got: gamma.dim(),
        });
    }
    for st in seq.stages() {
        let overlap = gamma.overlap_with(st);
        if overlap > 0 {
            return Err(Error::EstimatorNotIndependent {
                stage: st.stage_index,
                overlap,
            });
        }
    }

    let reversed;
    let seq = match cfg.direction {
        ChainDirection::Forward => seq,
        ChainDirection::Backward => {
            reversed = seq.reversed();
            &reversed
        }
    };
    let run_cfg = RunConfig {
        target_means: cfg.run_target_means(),
        ..cfg.clone()
    };
    let state = run_oriented(seq, gamma, &run_cfg, trainer)?;
    Ok(ChainState {
        config: cfg.clone(),
        ..state
    })
}

/// The greedy loop over `seq` as given; `cfg.target_means` are in run order.
fn run_oriented(
    seq: &DomainSequence,
    gamma: &AgeEstimator,
    cfg: &RunConfig,
    trainer: &dyn Trainer,
) -> Result<ChainState> {
    let n = seq.n_stages();
    let d = seq.dimension();
    let n_slots = n - 1;

    // Baselines depend only on their own pair and seed, so they can be
    // trained up front and in parallel.
    let train_baseline = |slot: usize| -> Result<TrainOutput> {
        let init = init_transformer(
            d,
            cfg.trainer.init_mode,
            &cfg.trainer,
            seed::substream(cfg.seed, &format!("init/module/{slot}")),
        )?;
        train_module(
            trainer,
            init,
            seq,
            &[slot],
            slot,
            slot,
            Role::Baseline,
            gamma,
            cfg,
            &format!("train/baseline/{slot}"),
        )
    };
    let baselines: Vec<Result<TrainOutput>> = if cfg.parallel_baselines {
        (1..=n_slots).into_par_iter().map(train_baseline).collect()
    } else {
        (1..=n_slots).map(train_baseline).collect()
    };

    let mut modules = BTreeMap::new();
    let mut curves = Vec::new();
    for (j, res) in baselines.into_iter().enumerate() {
        let slot = j + 1;
        let out = res.map_err(|e| aborted(slot, "baseline training", e, &[]))?;
        curves.extend(out.curve);
        modules.insert(
            slot,
            ChainModule {
                id: slot,
                transformer: out.transformer,
                origin: (slot, slot + 1),
            },
        );
    }

    let mut state = ChainState {
        target_means: cfg.target_means.clone(),
        modules,
        slots: (1..=n_slots).collect(),
        reuse_index: 1,
        decision_log: Vec::with_capacity(n.saturating_sub(2)),
        config: cfg.clone(),
        curves,
        archive: Vec::new(),
    };

    for i in 2..n_slots + 1 {
        let record = iterate(&mut state, i, seq, gamma, cfg, trainer)
            .map_err(|(phase, e)| aborted(i, phase, e, &state.decision_log))?;
        state.decision_log.push(record);
    }
    state.check_invariants(true)?;
    Ok(state)
}

fn score(
    phi: &ReversibleTransformer,
    seq: &DomainSequence,
    slot: usize,
    gamma: &AgeEstimator,
    cfg: &RunConfig,
) -> Result<ScoreReport> {
    score_error(phi, seq.stage(slot)?, cfg.target_means[slot], gamma, cfg.sigma_floor)
}

type PhaseResult<T> = std::result::Result<T, (&'static str, Error)>;

fn iterate(
    state: &mut ChainState,
    i: usize,
    seq: &DomainSequence,
    gamma: &AgeEstimator,
    cfg: &RunConfig,
    trainer: &dyn Trainer,
) -> PhaseResult<DecisionRecord> {
    let n_stages = state.n_stages();
    let a = state.reuse_index;
    let candidate = state.slots[a - 1];
    let baseline_id = state.slots[i - 1];

    let baseline_report = score(&state.modules[&baseline_id].transformer, seq, i, gamma, cfg)
        .map_err(|e| ("baseline scoring", e))?;

    let mut record = DecisionRecord {
        iteration: i,
        reuse_index: a,
        baseline_module: baseline_id,
        recycled_module: None,
        e_baseline: baseline_report.normalized_error,
        e_recycled: None,
        epsilon: cfg.epsilon,
        mode: cfg.decision_mode,
        outcome: Outcome::Baseline,
        baseline_sigma_floored: baseline_report.sigma_floored,
        recycled_sigma_floored: false,
        forgetting_error: None,
        reuse_index_after: i,
    };

    let reuses = state.slots.iter().filter(|&&id| id == candidate).count() - 1;
    if cfg.max_reuses.is_some_and(|cap| reuses >= cap) {
        record.outcome = Outcome::Capped;
        state.reuse_index = i;
        return Ok(record);
    }

    let recycled_id = n_stages - 1 + (i - 1);
    let copy = state.modules[&candidate].transformer.copy();
    let origin = state.modules[&candidate].origin;
    let out = train_module(
        trainer,
        copy,
        seq,
        &[i - 1, i],
        i,
        recycled_id,
        Role::Recycled,
        gamma,
        cfg,
        &format!("train/recycled/{i}"),
    )
    .map_err(|e| ("recycled training", e))?;
    state.curves.extend(out.curve);
    let recycled = out.transformer;

    let recycled_report =
        score(&recycled, seq, i, gamma, cfg).map_err(|e| ("recycled scoring", e))?;
    record.recycled_module = Some(recycled_id);
    record.e_recycled = Some(recycled_report.normalized_error);
    record.recycled_sigma_floored = recycled_report.sigma_floored;

    let mut wins = cfg.decision_mode.recycled_wins(
        baseline_report.normalized_error,
        recycled_report.normalized_error,
        cfg.epsilon,
    );
    if wins {
        if let Some(limit) = cfg.max_forgetting_error {
            let earliest = state.slots.iter().position(|&id| id == candidate).unwrap() + 1;
            let r = score(&recycled, seq, earliest, gamma, cfg)
                .map_err(|e| ("forgetting check", e))?;
            record.forgetting_error = Some(r.normalized_error);
            if r.normalized_error > limit {
                wins = false;
                record.outcome = Outcome::Forgetting;
            }
        }
    }

    let archive = cfg.archive_released;
    let release = |state: &mut ChainState, module: ChainModule| {
        if archive {
            state.archive.push(ArchivedModule { module, iteration: i });
        }
    };
    let new_module = ChainModule {
        id: recycled_id,
        transformer: recycled,
        origin,
    };
    if wins {
        record.outcome = Outcome::Recycled;
        for slot in state.slots.iter_mut() {
            if *slot == candidate {
                *slot = recycled_id;
            }
        }
        state.slots[i - 1] = recycled_id;
        let old_baseline = state.modules.remove(&baseline_id).expect("baseline present");
        let old_candidate = state.modules.remove(&candidate).expect("candidate present");
        release(state, old_baseline);
        release(state, old_candidate);
        state.modules.insert(recycled_id, new_module);
        // `a` keeps pointing at the upgraded module.
    } else {
        release(state, new_module);
        state.reuse_index = i;
    }
    record.reuse_index_after = state.reuse_index;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{init_transformer, InitMode, TrainerSettings};

    fn toy_chain(slots: Vec<ModuleId>) -> ChainState {
        let settings = TrainerSettings::default();
        let mut modules = BTreeMap::new();
        for (j, &id) in slots.iter().enumerate() {
            modules.entry(id).or_insert_with(|| ChainModule {
                id,
                transformer: init_transformer(2, InitMode::SeededRandom, &settings, id as u64)
                    .unwrap(),
                origin: (j + 1, j + 2),
            });
        }
        let n = slots.len() + 1;
        ChainState {
            target_means: (0..n).map(|i| 15.0 + 10.0 * i as f64).collect(),
            modules,
            slots,
            reuse_index: 1,
            decision_log: Vec::new(),
            config: RunConfig::default(),
            curves: Vec::new(),
            archive: Vec::new(),
        }
    }

    #[test]
    fn same_stage_is_identity() {
        let c = toy_chain(vec![1, 2, 3]);
        let x = Sample::new(vec![0.3, -1.0]).unwrap();
        assert_eq!(c.transform_to_stage(&x, 2, 2).unwrap(), x);
    }

    #[test]
    fn forward_composition_order() {
        let c = toy_chain(vec![1, 2, 3]);
        let x = Sample::new(vec![0.3, -1.0]).unwrap();
        let expected = c.modules[&2]
            .transformer
            .apply_forward(&c.modules[&1].transformer.apply_forward(&x).unwrap())
            .unwrap();
        assert_eq!(c.transform_to_stage(&x, 1, 3).unwrap(), expected);
    }

    #[test]
    fn backward_uses_reverse_slot_order() {
        let c = toy_chain(vec![1, 2, 3]);
        let x = Sample::new(vec![0.3, -1.0]).unwrap();
        let expected = c.modules[&1]
            .transformer
            .apply_backward(&c.modules[&2].transformer.apply_backward(&x).unwrap())
            .unwrap();
        assert_eq!(c.transform_to_stage(&x, 3, 1).unwrap(), expected);
    }

    #[test]
    fn out_of_range_stage() {
        let c = toy_chain(vec![1, 2, 3]);
        let x = Sample::new(vec![0.3, -1.0]).unwrap();
        assert!(matches!(
            c.transform_to_stage(&x, 0, 2),
            Err(Error::StageOutOfRange { stage: 0, .. })
        ));
        assert!(c.transform_to_stage(&x, 1, 5).is_err());
    }

    #[test]
    fn contiguity_invariant() {
        assert!(toy_chain(vec![1, 7, 7, 4]).check_invariants(false).is_ok());
        assert!(toy_chain(vec![1, 7, 3, 7]).check_invariants(false).is_err());
    }

    #[test]
    fn no_checkpoints_is_an_error() {
        assert!(matches!(
            toy_chain(vec![1, 2]).training_curve(),
            Err(Error::NoCheckpoints)
        ));
    }
}
