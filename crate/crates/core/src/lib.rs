//! Chains of reversible stage-to-stage transformers over unpaired stage
//! datasets, compressed by greedily re-using a module on the next stage
//! whenever an auxiliary age estimator scores it as good as a fresh one.
//!
//! ```no_run
//! use devchain::{chain, scorer, synth, RunConfig};
//!
//! let params = synth::ProcessParams::default();
//! let spec = synth::ProcessSpec::random(&params, 7).unwrap();
//! let train = synth::generate_process(&spec, 1).unwrap();
//! let held_out = synth::generate_process(&spec, 2).unwrap();
//! let gamma = scorer::fit_estimator(&held_out.labeled(), 1e-6, 2).unwrap();
//! let cfg = RunConfig { steps: 3000, ..RunConfig::default() };
//! let run = chain::run_chain(&train.sequence, &gamma, &cfg).unwrap();
//! println!("{}", run.descriptor());
//! ```

pub mod chain;
pub mod domain;
pub mod error;
pub mod io;
pub mod linalg;
pub mod scorer;
pub mod seed;
pub mod synth;
pub mod transformer;

pub use chain::{run_chain, ChainState, DecisionRecord, Descriptor};
pub use domain::{ChainDirection, DecisionMode, DomainSequence, RunConfig, Sample, StageDataset};
pub use error::{Error, Result};
pub use scorer::{fit_estimator, score_error, AgeEstimator, ScoreReport};
pub use transformer::{ReversibleTransformer, TrainerSettings};
