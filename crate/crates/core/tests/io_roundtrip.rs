mod common;

use common::*;
use devchain::chain::{evaluate_chain, ChainState};
use devchain::io::{
    load_chain, read_chain, read_curve_csv, read_decision_log, read_evaluation_csv, read_labels, read_stage_dir,
    read_stage_file, render_chain, save_chain, write_curve_csv, write_decision_log, write_evaluation_csv,
    write_stage_dir, write_stage_file,
};
use devchain::synth::{MapSchedule, SyntheticData};
use devchain::{fit_estimator, run_chain, AgeEstimator, Error, RunConfig, TrainerSettings};

struct Fixture {
    train: SyntheticData,
    held_out: SyntheticData,
    gamma: AgeEstimator,
    chain: ChainState,
}

fn fixture() -> Fixture {
    let params = linear_params(4, MapSchedule::AllDistinct);
    let train = draw(&params, 41, 1);
    let gamma = fit_estimator(&draw(&params, 41, 2).labeled(), 1e-6, 2).unwrap();
    let held_out = draw(&params, 41, 3);
    let cfg = RunConfig {
        n_stages: 4,
        target_means: params.target_means.clone(),
        steps: 120,
        epsilon: 0.05,
        checkpoint_interval: Some(40),
        archive_released: true,
        trainer: TrainerSettings {
            hidden_width: 2,
            ..TrainerSettings::default()
        },
        ..RunConfig::default()
    };
    let chain = run_chain(&train.sequence, &gamma, &cfg).unwrap();
    Fixture {
        train,
        held_out,
        gamma,
        chain,
    }
}

#[test]
fn saved_chain_loads_identically() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chain.txt");
    save_chain(&path, &f.chain, Some(&f.gamma)).unwrap();
    let loaded = load_chain(&path).unwrap();
    assert_eq!(loaded.chain, f.chain);
    let est = loaded.estimator.unwrap();
    assert_eq!(est.weights, f.gamma.weights);
    assert_eq!(est.bias, f.gamma.bias);

    for stage in f.held_out.sequence.stages() {
        for x in stage.samples.iter().take(20) {
            for to in 1..=4 {
                let a = f.chain.transform_to_stage(x, stage.stage_index, to).unwrap();
                let b = loaded.chain.transform_to_stage(x, stage.stage_index, to).unwrap();
                let bits = |s: &devchain::Sample| s.features().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&a), bits(&b));
            }
        }
    }
    // Shared modules are stored once.
    let text = std::fs::read_to_string(&path).unwrap();
    let (live, archived) = text.split_once("@@ archive").unwrap();
    for id in f.chain.modules.keys() {
        assert_eq!(live.matches(&format!("\nmodule {id} ")).count(), 1);
    }
    assert_eq!(live.matches("\nmodule ").count(), f.chain.n_modules());
    assert_eq!(archived.matches("\nmodule ").count(), f.chain.archive.len());
    assert!(f.chain.n_modules() < f.chain.slots.len());

    // Re-rendering the loaded chain reproduces the file byte for byte.
    assert_eq!(render_chain(&loaded.chain, Some(&est)).unwrap(), text);
}

#[test]
fn chain_file_rejects_damage() {
    let f = fixture();
    let text = render_chain(&f.chain, None).unwrap();
    assert!(read_chain(&text).unwrap().estimator.is_none());

    let bumped = text.replacen("devchain-chain v1", "devchain-chain v9", 1);
    let err = read_chain(&bumped).unwrap_err().to_string();
    assert!(err.contains("unsupported version 'v9'"), "{err}");

    let cut = text.find("@@ decisions").unwrap();
    let err = read_chain(&text[..cut]).unwrap_err().to_string();
    assert!(err.contains("truncated") && err.contains("'decisions'"), "{err}");

    let end = text.find("@@ end").unwrap();
    let err = read_chain(&text[..end]).unwrap_err().to_string();
    assert!(err.contains("truncated") && err.contains("end marker"), "{err}");

    let slots_at = text.find("@@ slots\n").unwrap() + "@@ slots\n".len();
    let mut tampered = text.clone();
    tampered.insert_str(slots_at, " ");
    let err = read_chain(&tampered).unwrap_err();
    assert!(matches!(&err, Error::ChainFile(m) if m == "digest mismatch"), "{err}");

    assert!(read_chain("hello\n").is_err());
}

#[test]
fn decision_log_and_curves_round_trip_through_csv() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("decisions.csv");
    write_decision_log(&log, &f.chain.decision_log).unwrap();
    assert_eq!(read_decision_log(&log).unwrap(), f.chain.decision_log);

    assert!(!f.chain.curves.is_empty());
    let curves = dir.path().join("curves.csv");
    write_curve_csv(&curves, &f.chain.curves).unwrap();
    assert_eq!(read_curve_csv(&curves).unwrap(), f.chain.curves);

    let table = evaluate_chain(&f.chain, &f.held_out.sequence, &f.gamma).unwrap();
    let eval = dir.path().join("eval.csv");
    write_evaluation_csv(&eval, &table.rows).unwrap();
    assert_eq!(read_evaluation_csv(&eval).unwrap(), table.rows);
}

#[test]
fn stage_files_round_trip() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    write_stage_dir(dir.path(), &f.train.sequence, Some(&f.train.labels)).unwrap();
    assert_eq!(read_stage_dir(dir.path()).unwrap(), f.train.sequence);
    assert_eq!(read_labels(&dir.path().join("labels.csv")).unwrap(), f.train.labels);

    let single = dir.path().join("all.csv");
    write_stage_file(&single, &f.train.sequence).unwrap();
    assert_eq!(read_stage_file(&single).unwrap(), f.train.sequence);
}

#[test]
fn malformed_stage_file_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(
        &path,
        "stage_index,target_mean_age,d\n1,15,2\nf0,f1\n0.5,1.0\n0.25,oops\n",
    )
    .unwrap();
    match read_stage_file(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
        other => panic!("expected parse error, got {other:?}"),
    }
}
