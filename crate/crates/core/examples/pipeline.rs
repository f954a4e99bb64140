//! End-to-end run into a run directory, then a resume after deleting the last
//! round, which must reproduce it byte for byte.
//!
//! `cargo run --release --example pipeline -- [run-dir]`
//!
//! Uses a reduced configuration so it finishes in well under a minute; pass
//! the default config through `gqs iterate` for the full-size run.

use std::path::PathBuf;

use gqs::config::RunConfig;
use gqs::pipeline::{run_pipeline, RunDir};

fn main() -> gqs::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("gqs-pipeline-example"));
    let _ = std::fs::remove_dir_all(&root);
    let run = RunDir::new(&root);

    let mut config = RunConfig::default();
    config.apply_overrides([
        "seed=2",
        "rounds=2",
        "data.ctr_lists=300",
        "data.sft_lists=300",
        "sft.epochs=4",
        "loop.prompts_per_round=60",
        "loop.eval_prompts=80",
    ])?;

    let rows = run_pipeline(&config, &run)?;
    for r in &rows {
        println!("{}", r.csv_row());
    }

    let last = run.policy_path(config.rounds);
    let before = std::fs::read(&last).map_err(|e| gqs::GqsError::io(&last, e))?;
    std::fs::remove_dir_all(run.round_dir(config.rounds)).map_err(|e| gqs::GqsError::io(&last, e))?;
    run_pipeline(&config, &run)?;
    let after = std::fs::read(&last).map_err(|e| gqs::GqsError::io(&last, e))?;
    println!("resumed round {} identical: {}", config.rounds, before == after);
    println!("artifacts in {}", root.display());
    Ok(())
}
