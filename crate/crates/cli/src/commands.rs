use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use devchain::chain::{evaluate_chain, Direction, EvaluationTable};
use devchain::io::{
    load_chain, read_labels, read_stage_dir, save_chain, write_curve_csv, write_decision_log,
    write_evaluation_csv, write_stage_dir,
};
use devchain::scorer::LabeledSample;
use devchain::seed::SeedPlan;
use devchain::synth::{generate_process, ProcessSpec};
use devchain::{fit_estimator, run_chain, AgeEstimator, ChainState, DomainSequence, Error};

use crate::config::FileConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{unix_now, RunManifest};

pub const CHAIN_FILE: &str = "chain.txt";
pub const DECISIONS_FILE: &str = "decisions.csv";
pub const PARTIAL_DECISIONS_FILE: &str = "decisions.partial.csv";
pub const DESCRIPTOR_FILE: &str = "descriptor.txt";
pub const EVALUATION_FILE: &str = "evaluation.csv";
pub const CURVES_FILE: &str = "curves.csv";

const SPLITS: [&str; 3] = ["train", "estimator", "validation"];

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("creating {}: {e}", dir.display())))
}

/// `stage_*.csv` files of a stage directory plus its `labels.csv`, if any.
fn stage_dir_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Runtime(format!("reading {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            (name.starts_with("stage_") && name.ends_with(".csv")) || name == "labels.csv"
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Writes the three generated splits under `out_dir` and returns the
/// manifest text.
pub fn generate(cfg: &FileConfig, config_path: Option<&Path>, out_dir: &Path) -> CliResult<String> {
    if cfg.data.is_some() {
        return Err(CliError::validation("generate needs a [synth] section, not [data]"));
    }
    let started = unix_now();
    let seeds = SeedPlan::new(cfg.seed);
    let spec = ProcessSpec::random(&cfg.synth, seeds.process)?;
    let mut manifest = RunManifest::new("generate", cfg, started);
    if let Some(p) = config_path {
        manifest.add_input(p)?;
    }
    create_dir(out_dir)?;
    for (split, seed) in SPLITS.iter().zip([seeds.train_data, seeds.estimator_data, seeds.validation_data]) {
        let data = generate_process(&spec, seed)?;
        let dir = out_dir.join(split);
        write_stage_dir(&dir, &data.sequence, Some(&data.labels))?;
        for file in stage_dir_files(&dir)? {
            let rel = file.strip_prefix(out_dir).unwrap_or(&file).to_path_buf();
            manifest.add_artifact(out_dir, &rel)?;
        }
    }
    manifest.finish(out_dir)
}

struct Inputs {
    train: DomainSequence,
    estimator: AgeEstimator,
    validation: Option<DomainSequence>,
    files: Vec<PathBuf>,
}

fn labeled_split(dir: &Path) -> CliResult<Vec<LabeledSample>> {
    let seq = read_stage_dir(dir)?;
    let labels = read_labels(&dir.join("labels.csv"))?;
    if labels.len() != seq.n_stages() {
        return Err(CliError::validation(format!(
            "{}: labels cover {} stages, found {}",
            dir.display(),
            labels.len(),
            seq.n_stages()
        )));
    }
    let mut out = Vec::new();
    for (stage, ages) in seq.stages().iter().zip(labels) {
        if ages.len() != stage.len() {
            return Err(CliError::validation(format!(
                "{}: stage {} has {} rows but {} labels",
                dir.display(),
                stage.stage_index,
                stage.len(),
                ages.len()
            )));
        }
        out.extend(stage.samples.iter().zip(ages).map(|(s, a)| LabeledSample {
            sample: s.clone(),
            true_age: a,
        }));
    }
    Ok(out)
}

fn load_inputs(cfg: &FileConfig) -> CliResult<Inputs> {
    let seeds = SeedPlan::new(cfg.seed);
    match &cfg.data {
        None => {
            let spec = ProcessSpec::random(&cfg.synth, seeds.process)?;
            let train = generate_process(&spec, seeds.train_data)?.sequence;
            let labeled = generate_process(&spec, seeds.estimator_data)?.labeled();
            let estimator = fit_estimator(&labeled, cfg.run.ridge, seeds.estimator)?;
            let validation = Some(generate_process(&spec, seeds.validation_data)?.sequence);
            Ok(Inputs {
                train,
                estimator,
                validation,
                files: Vec::new(),
            })
        }
        Some(paths) => {
            let train = read_stage_dir(&paths.train)?;
            let estimator = fit_estimator(&labeled_split(&paths.estimator)?, cfg.run.ridge, seeds.estimator)?;
            let validation = paths.validation.as_deref().map(read_stage_dir).transpose()?;
            let mut files = stage_dir_files(&paths.train)?;
            files.extend(stage_dir_files(&paths.estimator)?);
            if let Some(v) = &paths.validation {
                files.extend(stage_dir_files(v)?);
            }
            Ok(Inputs {
                train,
                estimator,
                validation,
                files,
            })
        }
    }
}

/// Runs the greedy chain, writes every artifact and returns a printable
/// summary.
pub fn run(cfg: &FileConfig, config_path: Option<&Path>, out_dir: &Path) -> CliResult<String> {
    let started = unix_now();
    let inputs = load_inputs(cfg)?;
    let mut cfg = cfg.clone();
    cfg.run.n_stages = inputs.train.n_stages();
    cfg.run.target_means = inputs.train.target_means();

    let mut manifest = RunManifest::new("run", &cfg, started);
    if let Some(p) = config_path {
        manifest.add_input(p)?;
    }
    for f in &inputs.files {
        manifest.add_input(f)?;
    }
    create_dir(out_dir)?;

    let chain = match run_chain(&inputs.train, &inputs.estimator, &cfg.run) {
        Ok(chain) => chain,
        Err(e) => {
            if let Error::ChainAborted { partial_log, .. } = &e {
                write_decision_log(&out_dir.join(PARTIAL_DECISIONS_FILE), partial_log)?;
            }
            return Err(e.into());
        }
    };

    save_chain(&out_dir.join(CHAIN_FILE), &chain, Some(&inputs.estimator))?;
    write_decision_log(&out_dir.join(DECISIONS_FILE), &chain.decision_log)?;
    let descriptor = chain.descriptor().render();
    std::fs::write(out_dir.join(DESCRIPTOR_FILE), format!("{descriptor}\n"))
        .map_err(|e| CliError::Runtime(format!("writing descriptor: {e}")))?;
    write_curve_csv(&out_dir.join(CURVES_FILE), &chain.curves)?;
    let mut written = vec![CHAIN_FILE, DECISIONS_FILE, DESCRIPTOR_FILE, CURVES_FILE];

    let mut summary = chain_summary(&chain);
    if let Some(validation) = &inputs.validation {
        let table = evaluate_chain(&chain, validation, &inputs.estimator)?;
        write_evaluation_csv(&out_dir.join(EVALUATION_FILE), &table.rows)?;
        written.push(EVALUATION_FILE);
        summary.push_str(&hop_summary(&table));
    }
    for f in written {
        manifest.add_artifact(out_dir, Path::new(f))?;
    }
    manifest.finish(out_dir)?;
    let _ = writeln!(summary, "artifacts written to {}", out_dir.display());
    Ok(summary)
}

/// Scores a saved chain on a validation stage directory.
pub fn eval(chain_path: &Path, validation_dir: &Path, out_dir: &Path) -> CliResult<String> {
    let loaded = load_chain(chain_path)?;
    let estimator = loaded
        .estimator
        .ok_or_else(|| CliError::validation(format!("{} carries no age estimator", chain_path.display())))?;
    let validation = read_stage_dir(validation_dir)?;
    let table = evaluate_chain(&loaded.chain, &validation, &estimator)?;
    create_dir(out_dir)?;
    let path = out_dir.join(EVALUATION_FILE);
    write_evaluation_csv(&path, &table.rows)?;
    let mut out = format!("{}\n", loaded.chain.descriptor().render());
    out.push_str(&hop_summary(&table));
    let _ = writeln!(out, "wrote {} rows to {}", table.rows.len(), path.display());
    Ok(out)
}

/// Descriptor, slot table and decision log of a saved chain; with a
/// manifest, also checks every recorded digest.
pub fn inspect(chain_path: &Path, manifest: Option<&Path>) -> CliResult<String> {
    let loaded = load_chain(chain_path)?;
    let mut out = chain_summary(&loaded.chain);
    out.push_str("iteration,reuse_index,baseline,recycled,e_baseline,e_recycled,outcome,reuse_index_after\n");
    for r in &loaded.chain.decision_log {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{},{},{}",
            r.iteration,
            r.reuse_index,
            r.baseline_module,
            opt(r.recycled_module.map(|m| m.to_string())),
            r.e_baseline,
            opt(r.e_recycled.map(|e| format!("{e:.6}"))),
            r.outcome.as_str(),
            r.reuse_index_after
        );
    }
    if let Some(path) = manifest {
        let m = RunManifest::load(path)?;
        let problems = m.verify(path.parent().unwrap_or(Path::new("")));
        if !problems.is_empty() {
            return Err(CliError::validation(format!("manifest check failed:\n  {}", problems.join("\n  "))));
        }
        let _ = writeln!(
            out,
            "manifest ok: {} inputs, {} artifacts, seed {}",
            m.inputs.len(),
            m.artifacts.len(),
            m.seeds.master
        );
    }
    Ok(out)
}

fn chain_summary(chain: &ChainState) -> String {
    let cfg = &chain.config;
    let mut out = format!("{}\n", chain.descriptor().render());
    let _ = writeln!(
        out,
        "{} stages, {} modules, direction {}, mode {}, epsilon {}, steps {}, seed {}",
        chain.n_stages(),
        chain.n_modules(),
        cfg.direction,
        cfg.decision_mode,
        cfg.epsilon,
        cfg.steps,
        cfg.seed
    );
    let slots: Vec<String> = chain.slots.iter().map(|m| m.to_string()).collect();
    let _ = writeln!(out, "slots: {}", slots.join(" "));
    out
}

fn hop_summary(table: &EvaluationTable) -> String {
    let mut out = String::from("in-chain hops (target: reached mean +- std):\n");
    for r in table.in_chain_hops(Direction::Forward) {
        let _ = writeln!(out, "  {}: {:.2} +- {:.2}", r.target, r.reached_mean, r.reached_std);
    }
    out
}
