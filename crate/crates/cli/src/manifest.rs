//! Run manifest: what was run, with which seeds, on which inputs, and the
//! digest of every artifact written.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use devchain::io::file_digest;
use devchain::seed::SeedPlan;
use serde::{Deserialize, Serialize};

use crate::config::FileConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Seeds as decimal strings: derived seeds use the full `u64` range, which
/// TOML integers cannot hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: String,
    pub process: String,
    pub train_data: String,
    pub estimator_data: String,
    pub validation_data: String,
    pub estimator: String,
    pub run: String,
}

impl From<SeedPlan> for Seeds {
    fn from(p: SeedPlan) -> Self {
        Self {
            master: p.master.to_string(),
            process: p.process.to_string(),
            train_data: p.train_data.to_string(),
            estimator_data: p.estimator_data.to_string(),
            validation_data: p.validation_data.to_string(),
            estimator: p.estimator.to_string(),
            run: p.run.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub seeds: Seeds,
    /// Input files; paths as given on the command line or in the config.
    pub inputs: Vec<FileEntry>,
    /// Written files, relative to the manifest's directory.
    pub artifacts: Vec<FileEntry>,
    pub config: FileConfig,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn entry(path: &Path, recorded: PathBuf) -> CliResult<FileEntry> {
    Ok(FileEntry {
        path: recorded,
        sha256: file_digest(path)?,
    })
}

impl RunManifest {
    pub fn new(command: &str, config: &FileConfig, started_unix: u64) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            started_unix,
            finished_unix: started_unix,
            seeds: SeedPlan::new(config.seed).into(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
            config: config.clone(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(entry(path, path.to_path_buf())?);
        Ok(())
    }

    /// Records `out_dir/relative`.
    pub fn add_artifact(&mut self, out_dir: &Path, relative: &Path) -> CliResult<()> {
        self.artifacts.push(entry(&out_dir.join(relative), relative.to_path_buf())?);
        Ok(())
    }

    pub fn render(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("rendering manifest: {e}")))
    }

    /// Stamps the finish time, writes `out_dir/manifest.toml` and returns its text.
    pub fn finish(mut self, out_dir: &Path) -> CliResult<String> {
        self.finished_unix = unix_now();
        let text = self.render()?;
        let path = out_dir.join(MANIFEST_FILE);
        std::fs::write(&path, &text).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
        Ok(text)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("reading {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
    }

    /// Files that are missing or no longer match their digest.
    pub fn verify(&self, manifest_dir: &Path) -> Vec<String> {
        let check = |path: PathBuf, want: &str| match file_digest(&path) {
            Ok(got) if got == want => None,
            Ok(_) => Some(format!("{}: digest mismatch", path.display())),
            Err(e) => Some(format!("{}: {e}", path.display())),
        };
        let inputs = self.inputs.iter().filter_map(|f| check(f.path.clone(), &f.sha256));
        let artifacts = self
            .artifacts
            .iter()
            .filter_map(|f| check(manifest_dir.join(&f.path), &f.sha256));
        inputs.chain(artifacts).collect()
    }
}
