use std::path::Path;
use std::process::{Command, Output};

use gqs::config::RunConfig;
use gqs::pipeline::{run_pipeline, sweep, RunDir, RunLock};
use gqs::GqsError;

fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_overrides([
        "seed=3",
        "rounds=2",
        "data.ctr_lists=60",
        "data.sft_lists=60",
        "sft.epochs=1",
        "ctr.epochs=2",
        "loop.m=4",
        "loop.prompts_per_round=10",
        "loop.eval_prompts=10",
    ])
    .unwrap();
    c
}

fn gqs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gqs")).args(args).output().unwrap()
}

fn gqs_ok(args: &[&str]) {
    let out = gqs(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn round_files(run: &RunDir, t: usize) -> Vec<Vec<u8>> {
    [
        run.policy_path(t),
        run.ctr_path(t),
        run.pairs_path(t),
        run.metrics_path(t),
    ]
    .iter()
    .filter(|p| t > 0 || !p.ends_with("pairs.jsonl"))
    .map(|p| std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display())))
    .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn stepwise_commands_match_iterate_and_resume_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny();
    let cfg_path = tmp.path().join("tiny.txt");
    config.save(&cfg_path).unwrap();

    let whole = RunDir::new(tmp.path().join("whole"));
    let rows = run_pipeline(&config, &whole).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(whole.report_dir().join("metrics.csv").is_file());
    assert!(whole.report_dir().join("ctr_per_round.svg").is_file());

    let steps = tmp.path().join("steps");
    let run = s(&steps);
    gqs_ok(&["simulate", "--run", run, "--config", s(&cfg_path)]);
    gqs_ok(&["sft", "--run", run]);
    gqs_ok(&["train-ctr", "--run", run]);
    gqs_ok(&["eval", "--run", run, "--round", "0"]);
    for t in ["1", "2"] {
        gqs_ok(&["build-pairs", "--run", run, "--round", t]);
        gqs_ok(&["dpo", "--run", run, "--round", t]);
        gqs_ok(&["eval", "--run", run, "--round", t]);
    }
    let stepped = RunDir::new(&steps);
    for t in 0..=2 {
        assert!(round_files(&whole, t) == round_files(&stepped, t), "round {t} differs");
    }

    let before = round_files(&whole, 2);
    std::fs::remove_dir_all(whole.round_dir(2)).unwrap();
    assert_eq!(whole.completed_rounds(), 2);
    run_pipeline(&config, &whole).unwrap();
    assert!(before == round_files(&whole, 2), "resumed round differs");
}

#[test]
fn zero_rounds_stops_after_the_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = tiny();
    config.rounds = 0;
    let run = RunDir::new(tmp.path());
    let rows = run_pipeline(&config, &run).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].round, 0);
    assert!(run.metrics_path(0).is_file());
    assert!(!run.round_dir(1).exists());
}

#[test]
fn single_value_sweep_writes_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = tiny();
    config.rounds = 1;
    let rows = sweep(&config, tmp.path(), "dpo.lambda", &["0.01".into()], false).unwrap();
    assert_eq!(rows.len(), 1);
    let csv = std::fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
}

#[test]
fn a_held_lock_blocks_a_second_run() {
    let tmp = tempfile::tempdir().unwrap();
    let _held = RunLock::acquire(tmp.path()).unwrap();
    let err = run_pipeline(&tiny(), &RunDir::new(tmp.path())).unwrap_err();
    assert!(matches!(err, GqsError::Locked(_)), "{err}");
    let out = gqs(&["simulate", "--run", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let run = s(tmp.path());
    assert_eq!(
        gqs(&["simulate", "--run", run, "--set", "loop.m=1"]).status.code(),
        Some(2)
    );
    assert_eq!(
        gqs(&["simulate", "--run", run, "--set", "no.such.key=1"]).status.code(),
        Some(2)
    );
    assert_eq!(
        gqs(&["simulate", "--run", run, "--task", "task9"]).status.code(),
        Some(2)
    );
    assert_eq!(gqs(&["frobnicate"]).status.code(), Some(2));

    let bad = tmp.path().join("bad.txt");
    std::fs::write(&bad, "dpo.beta = -1\n").unwrap();
    assert_eq!(
        gqs(&["simulate", "--run", run, "--config", s(&bad)]).status.code(),
        Some(2)
    );
}
