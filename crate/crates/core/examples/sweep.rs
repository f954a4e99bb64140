//! Sweeps the diversity weight λ over the grid {1, 0.1, 0.01, 0.001, 0.0001}
//! on a reduced world and prints the comparison table.
//!
//! `cargo run --release --example sweep -- [parameter] [v1,v2,...]`

use gqs::config::RunConfig;
use gqs::metrics::MetricsReport;
use gqs::pipeline::sweep;

fn main() -> gqs::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let parameter = args.get(1).cloned().unwrap_or_else(|| "dpo.lambda".into());
    let values: Vec<String> = args
        .get(2)
        .map(|v| v.split(',').map(str::to_string).collect())
        .unwrap_or_else(|| ["1.0", "0.1", "0.01", "0.001", "0.0001"].map(String::from).to_vec());

    let mut config = RunConfig::default();
    config.apply_overrides([
        "rounds=1",
        "data.ctr_lists=300",
        "data.sft_lists=300",
        "sft.epochs=4",
        "loop.prompts_per_round=60",
        "loop.eval_prompts=80",
    ])?;
    let root = std::env::temp_dir().join("gqs-sweep-example");
    let _ = std::fs::remove_dir_all(&root);
    let rows = sweep(&config, &root, &parameter, &values, false)?;
    println!("{parameter},{}", MetricsReport::CSV_HEADER);
    for r in rows {
        println!("{},{}", r.value, r.last.csv_row());
    }
    println!("runs and sweep.csv in {}", root.display());
    Ok(())
}
