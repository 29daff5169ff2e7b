//! Run configuration file.
//!
//! ```toml
//! seed = 1                 # master seed; every other seed derives from it
//!
//! [synth]                  # generating process, used when [data] is absent
//! samples_per_stage = 512
//! schedule = { kind = "shared_middle", first = 2, last = 5 }
//!
//! [data]                   # optional: stage directories instead of [synth]
//! train = "data/train"
//! estimator = "data/estimator"   # must hold labels.csv
//! validation = "data/validation" # optional
//!
//! [run]                    # chain settings; stage count and targets come
//! steps = 2000             # from the data, the seed from `seed`
//! epsilon = 0.1
//! ```

use std::path::{Path, PathBuf};

use devchain::synth::ProcessParams;
use devchain::{ChainDirection, DecisionMode, RunConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    pub estimator: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: u64,
    pub synth: ProcessParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DataPaths>,
    pub run: RunConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: ProcessParams::default(),
            data: None,
            run: RunConfig {
                steps: 2000,
                ..RunConfig::default()
            },
        }
    }
}

/// Keys of `[run]` owned by something else.
const DERIVED_RUN_KEYS: [(&str, &str); 3] = [
    ("seed", "use the top-level `seed`"),
    ("n_stages", "the stage count comes from the data"),
    ("target_means", "stage targets come from the data"),
];

impl FileConfig {
    pub fn parse(text: &str, origin: &str) -> CliResult<Self> {
        let raw: toml::Table = text
            .parse()
            .map_err(|e| CliError::validation(format!("{origin}: {e}")))?;
        if let Some(run) = raw.get("run").and_then(|v| v.as_table()) {
            for (key, why) in DERIVED_RUN_KEYS {
                if run.contains_key(key) {
                    return Err(CliError::validation(format!("{origin}: [run] {key} is not settable; {why}")));
                }
            }
        }
        if raw.contains_key("data") && raw.contains_key("synth") {
            return Err(CliError::validation(format!(
                "{origin}: give either [synth] or [data], not both"
            )));
        }
        let mut cfg: FileConfig =
            toml::from_str(text).map_err(|e| CliError::validation(format!("{origin}: {e}")))?;
        cfg.run.seed = cfg.seed;
        Ok(cfg)
    }

    /// Reads `path`; relative data paths are taken from the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("reading {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        if let Some(data) = cfg.data.as_mut() {
            let base = path.parent().unwrap_or(Path::new(""));
            data.train = base.join(&data.train);
            data.estimator = base.join(&data.estimator);
            data.validation = data.validation.as_ref().map(|v| base.join(v));
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
            self.run.seed = seed;
        }
        if let Some(v) = o.epsilon {
            self.run.epsilon = v;
        }
        if let Some(v) = o.steps {
            self.run.steps = v;
        }
        if let Some(v) = o.decision_mode {
            self.run.decision_mode = v;
        }
        if let Some(v) = o.direction {
            self.run.direction = v;
        }
        if let Some(v) = o.checkpoint_interval {
            self.run.checkpoint_interval = Some(v);
        }
        if let Some(v) = o.max_forgetting_error {
            self.run.max_forgetting_error = Some(v);
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub steps: Option<usize>,
    pub decision_mode: Option<DecisionMode>,
    pub direction: Option<ChainDirection>,
    pub checkpoint_interval: Option<usize>,
    pub max_forgetting_error: Option<f64>,
}
