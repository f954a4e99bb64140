//! Prints the default task-2 configuration file, then shows how a file and
//! command-line overrides combine, and the hash recorded in run manifests.

use gqs::config::{RunConfig, Task};

fn main() -> gqs::Result<()> {
    let defaults = RunConfig::for_task(Task::Task2);
    print!("{}", defaults.to_text());

    let file = "# my experiment\ntask = task2\nseed = 11\ndpo.lambda = 0.01\n";
    let mut config = RunConfig::from_text(file)?;
    config.apply_overrides(["dpo.lambda=0.001", "loop.fixed_ctr=true"])?;
    println!(
        "\nlambda {} (flag beats file), seed {}, fixed_ctr {}",
        config.dpo.lambda,
        config.seed,
        config.loop_config().fixed_ctr
    );
    println!("reward_tol for N={}: {}", config.list_len(), config.pairs.reward_tol);
    println!("hash {}", config.hash());

    let roundtrip = RunConfig::from_text(&config.to_text())?.to_text();
    println!("text round-trip identical: {}", roundtrip == config.to_text());
    Ok(())
}
