use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use devchain::chain::{ChainModule, Direction};
use devchain::io::{load_chain, read_decision_log, read_evaluation_csv, read_stage_dir, save_chain, write_stage_dir};
use devchain::synth::{generate_process, MapSchedule, ProcessParams, ProcessSpec};
use devchain::transformer::{init_transformer, InitMode};
use devchain::{fit_estimator, ChainState, DecisionMode, RunConfig, TrainerSettings};

const SMALL: &str = r#"
seed = 3

[synth]
target_means = [10.0, 20.0, 30.0, 40.0]
latent_dim = 4
observable_dim = 4
samples_per_stage = 64
schedule = { kind = "shared_middle", first = 2, last = 4 }

[run]
steps = 150
epsilon = 0.1
decision_mode = "one_sided"
checkpoint_interval = 50
"#;

fn devchain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_devchain")).args(args).output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn run_small(dir: &Path, out: &str, extra: &[&str]) -> (Output, PathBuf) {
    let config = write_config(dir, SMALL);
    let out_dir = dir.join(out);
    let mut args = vec!["run", "--config", config.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    (devchain(&args), out_dir)
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn default_generate_writes_six_stages_of_512_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = devchain(&["generate", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for split in ["train", "estimator", "validation"] {
        let seq = read_stage_dir(&out.join(split)).unwrap();
        assert_eq!(seq.n_stages(), 6);
        assert!(seq.stages().iter().all(|s| s.len() == 512));
        assert!(out.join(split).join("labels.csv").exists());
    }
    assert!(stdout(&o).contains("[[artifacts]]"));
}

#[test]
fn generate_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let mut files = Vec::new();
    for (name, seed) in [("a", "5"), ("b", "5"), ("c", "6")] {
        let out = dir.path().join(name);
        let o = devchain(&["generate", "--config", config.to_str().unwrap(), "--seed", seed, "--out-dir", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        files.push(std::fs::read(out.join("train/stage_2.csv")).unwrap());
    }
    assert_eq!(files[0], files[1]);
    assert_ne!(files[0], files[2]);
}

#[test]
fn single_sample_stages_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &SMALL.replace("samples_per_stage = 64", "samples_per_stage = 1"));
    let out = dir.path().join("data");
    let o = devchain(&["generate", "--config", config.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sigma needs >= 2 samples"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    assert_eq!(devchain(&["run", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(devchain(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(devchain(&["run", "--decision-mode", "sideways"]).status.code(), Some(1));
    assert_eq!(devchain(&["run", "--seed", "9223372036854775808"]).status.code(), Some(1));
    assert_eq!(devchain(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_values_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for text in ["[run]\nseed = 4\n", "[run]\nsteps = 0\n", "not toml at all ["] {
        let config = write_config(dir.path(), text);
        let o = devchain(&["run", "--config", config.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{text}: {}", stderr(&o));
    }
    let o = devchain(&["run", "--epsilon=-1", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_writes_artifacts_listed_in_a_verifiable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = run_small(dir.path(), "out", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["chain.txt", "decisions.csv", "descriptor.txt", "evaluation.csv", "curves.csv", "manifest.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let chain = load_chain(&out.join("chain.txt")).unwrap();
    assert!(chain.estimator.is_some());
    let descriptor = std::fs::read_to_string(out.join("descriptor.txt")).unwrap();
    assert_eq!(descriptor.trim_end(), chain.chain.descriptor().render());
    assert_eq!(read_decision_log(&out.join("decisions.csv")).unwrap(), chain.chain.decision_log);
    assert!(!chain.chain.curves.is_empty());

    let chain_path = out.join("chain.txt");
    let manifest = out.join("manifest.toml");
    let o = devchain(&["inspect", chain_path.to_str().unwrap(), "--manifest", manifest.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with(&chain.chain.descriptor().render()));
    assert!(text.contains("manifest ok"));

    // Flip one byte of one artifact.
    let log = out.join("decisions.csv");
    let mut bytes = std::fs::read(&log).unwrap();
    let last = bytes.len() - 2;
    bytes[last] ^= 1;
    std::fs::write(&log, bytes).unwrap();
    let o = devchain(&["inspect", chain_path.to_str().unwrap(), "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("decisions.csv: digest mismatch"), "{}", stderr(&o));
}

#[test]
fn decision_mode_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = run_small(dir.path(), "out", &["--decision-mode", "two_sided", "--epsilon", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let chain = load_chain(&out.join("chain.txt")).unwrap().chain;
    assert_eq!(chain.config.decision_mode, DecisionMode::TwoSided);
    assert_eq!(chain.config.epsilon, 0.0);
    assert!(chain.decision_log.iter().all(|r| r.mode == DecisionMode::TwoSided));
    // Strict two-sided comparison at zero tolerance never re-uses.
    assert_eq!(chain.n_modules(), 3);
}

#[test]
fn rerun_with_manifest_seed_reproduces_decision_log() {
    let dir = tempfile::tempdir().unwrap();
    let (o, first) = run_small(dir.path(), "first", &["--seed", "11"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: toml::Table = std::fs::read_to_string(first.join("manifest.toml")).unwrap().parse().unwrap();
    let seed = manifest["seeds"]["master"].as_str().unwrap().to_string();
    assert_eq!(seed, "11");
    let (o, second) = run_small(dir.path(), "second", &["--seed", &seed]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = std::fs::read(first.join("decisions.csv")).unwrap();
    assert_eq!(a, std::fs::read(second.join("decisions.csv")).unwrap());
    let (_, third) = run_small(dir.path(), "third", &["--seed", "12"]);
    assert_ne!(
        std::fs::read(first.join("chain.txt")).unwrap(),
        std::fs::read(third.join("chain.txt")).unwrap()
    );
}

#[test]
fn backward_direction_flag_runs_oldest_first() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = run_small(dir.path(), "out", &["--direction", "backward"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let chain = load_chain(&out.join("chain.txt")).unwrap().chain;
    assert_eq!(chain.target_means, vec![40.0, 30.0, 20.0, 10.0]);
    assert!(chain.descriptor().render().contains("_{40→30}"));
}

#[test]
fn run_from_generated_stage_directories() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let data = dir.path().join("data");
    let o = devchain(&["generate", "--config", config.to_str().unwrap(), "--out-dir", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let run_section = &SMALL[SMALL.find("[run]").unwrap()..];
    let from_files = format!(
        "seed = 3\n[data]\ntrain = \"data/train\"\nestimator = \"data/estimator\"\nvalidation = \"data/validation\"\n{run_section}"
    );
    let files_config = dir.path().join("files.toml");
    std::fs::write(&files_config, from_files).unwrap();
    let out = dir.path().join("from_files");
    let o = devchain(&["run", "--config", files_config.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    // Same seed and same data, whether drawn in memory or read back.
    let (o, in_memory) = run_small(dir.path(), "in_memory", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(out.join("decisions.csv")).unwrap(),
        std::fs::read(in_memory.join("decisions.csv")).unwrap()
    );
    let manifest = std::fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert_eq!(manifest.matches("[[inputs]]").count(), 1 + 3 * 5);
}

#[test]
fn eval_of_identity_chain_reports_source_ages() {
    let dir = tempfile::tempdir().unwrap();
    let params = ProcessParams {
        target_means: vec![10.0, 20.0, 30.0, 40.0],
        latent_dim: 4,
        observable_dim: 4,
        samples_per_stage: 200,
        schedule: MapSchedule::AllDistinct,
        ..ProcessParams::default()
    };
    let spec = ProcessSpec::random(&params, 2).unwrap();
    let gamma = fit_estimator(&generate_process(&spec, 1).unwrap().labeled(), 1e-6, 1).unwrap();
    let validation = generate_process(&spec, 2).unwrap();
    let val_dir = dir.path().join("validation");
    write_stage_dir(&val_dir, &validation.sequence, None).unwrap();

    let settings = TrainerSettings::default();
    let modules: BTreeMap<_, _> = (1..=3)
        .map(|id| {
            let transformer = init_transformer(4, InitMode::Identity, &settings, 0).unwrap();
            (id, ChainModule { id, transformer, origin: (id, id + 1) })
        })
        .collect();
    let chain = ChainState {
        target_means: params.target_means.clone(),
        modules,
        slots: vec![1, 2, 3],
        reuse_index: 3,
        decision_log: Vec::new(),
        config: RunConfig {
            n_stages: 4,
            target_means: params.target_means.clone(),
            ..RunConfig::default()
        },
        curves: Vec::new(),
        archive: Vec::new(),
    };
    let chain_path = dir.path().join("identity.txt");
    save_chain(&chain_path, &chain, Some(&gamma)).unwrap();

    let out = dir.path().join("eval");
    let o = devchain(&["eval", "--chain", chain_path.to_str().unwrap(), "--validation", val_dir.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_evaluation_csv(&out.join("evaluation.csv")).unwrap();
    let hops: Vec<_> = rows.iter().filter(|r| r.slot.is_some()).collect();
    assert_eq!(hops.len(), 3 * 4 * 2);
    for r in hops {
        assert_eq!(r.reached_mean, r.input_mean_age);
        let source_target = params.target_means[r.start_stage - 1];
        assert!((r.reached_mean - source_target).abs() < 1.0, "{r:?}");
    }
    assert!(rows.iter().any(|r| r.direction == Direction::Backward));
}

#[test]
fn eval_rejects_truncated_chain_file() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = run_small(dir.path(), "out", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("chain.txt")).unwrap();
    let cut = dir.path().join("cut.txt");
    std::fs::write(&cut, &text[..text.find("@@ decisions").unwrap()]).unwrap();
    let data = dir.path().join("data");
    let config = write_config(dir.path(), SMALL);
    devchain(&["generate", "--config", config.to_str().unwrap(), "--out-dir", data.to_str().unwrap()]);
    let val = data.join("validation");
    let o = devchain(&["eval", "--chain", cut.to_str().unwrap(), "--validation", val.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("truncated") && err.contains("'decisions'"), "{err}");

    let bumped = dir.path().join("bumped.txt");
    std::fs::write(&bumped, text.replacen("devchain-chain v1", "devchain-chain v2", 1)).unwrap();
    let o = devchain(&["eval", "--chain", bumped.to_str().unwrap(), "--validation", val.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unsupported version"));
}

#[test]
fn shared_middle_demo_descriptor_has_an_exponent() {
    let dir = tempfile::tempdir().unwrap();
    let config = repo_config("shared_middle.toml");
    let out = dir.path().join("demo");
    let o = devchain(&["run", "--config", config.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let descriptor = std::fs::read_to_string(out.join("descriptor.txt")).unwrap();
    let exponents = devchain::Descriptor::parse_rendered(descriptor.trim_end()).unwrap();
    assert!(exponents.iter().any(|&(_, _, e)| e >= 2), "{descriptor}");
}

#[test]
fn bundled_configs_parse() {
    for name in ["shared_middle.toml", "control.toml"] {
        let dir = tempfile::tempdir().unwrap();
        let config = repo_config(name);
        let out = dir.path().join("data");
        let o = devchain(&["generate", "--config", config.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
    }
}
