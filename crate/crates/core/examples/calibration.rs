//! Importance-weighted recalibration after one aligned round: the clipped
//! weight histogram, and how the original and recalibrated CTR models score
//! clicks on the new policy's own greedy lists.
//!
//! `cargo run --release --example calibration -- [seed] [epsilon]`

use gqs::calibration::{importance_weights, run_iteration, IterationState, WeightHistogram};
use gqs::config::RunConfig;
use gqs::ctr::train_ctr;
use gqs::metrics::{auc, logloss};
use gqs::pipeline::{click_dataset, sft_dataset, Environment};
use gqs::policy::sft_train;
use gqs::rng;

fn main() -> gqs::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut config = RunConfig {
        seed: args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1),
        ..RunConfig::default()
    };
    if let Some(eps) = args.get(2) {
        config.set("loop.epsilon", eps)?;
    }
    config.apply_overrides(["loop.eval_prompts=100"])?;

    let env = Environment::new(&config)?;
    let d_ctr = click_dataset(&config, &env)?;
    let sft = sft_train(
        &sft_dataset(&config, &env),
        &config.policy_config(),
        &config.sft_config(),
        "example",
    )?;
    let ctr = train_ctr(&d_ctr, None, &config.ctr_config(), &config.ctr_train_config(), None)?;
    let lc = config.loop_config();
    let state = IterationState::start(env.sim(), sft, ctr, d_ctr, &lc)?;
    let (state, _) = run_iteration(env.sim(), &state, &lc)?;

    let weights = importance_weights(
        &state.d_ctr,
        &state.policies[0].policy,
        &state.current().policy,
        lc.epsilon,
    )?;
    let hist = WeightHistogram::new(&weights, lc.epsilon, 8);
    println!(
        "weights over {} logged lists: min {:.3} mean {:.3} max {:.3}",
        weights.len(),
        hist.min,
        hist.mean,
        hist.max
    );
    for (i, c) in hist.counts.iter().enumerate() {
        let lo = hist.lo + (hist.hi - hist.lo) * i as f64 / hist.counts.len() as f64;
        println!("  {lo:.3} {}", "#".repeat(c * 60 / weights.len().max(1)));
    }

    let recalibrated = train_ctr(&state.d_ctr, Some(&weights), &lc.ctr_model, &lc.ctr_train, None)?;
    let mut records = Vec::new();
    for i in 0..300 {
        let ctx = env.sim().prompt(config.seed, "calibration-example", i);
        let list = state
            .current()
            .policy
            .generate(&ctx, 1, lc.n, 0.0, &mut rng::stream(0, "greedy", 0))?
            .remove(0)
            .list;
        records.extend(env.world.sample_clicks(
            &list,
            &ctx,
            "example",
            &mut rng::stream(config.seed, "calibration-clicks", i),
        )?);
    }
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    for (name, model) in [("original", &state.ctr.model), ("recalibrated", &recalibrated.model)] {
        let scores = model.score_records(&records)?;
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let rate = labels.iter().map(|&l| l as f64).sum::<f64>() / labels.len() as f64;
        let a = auc(&scores, &labels)
            .map(|a| format!("{a:.3}"))
            .unwrap_or_else(|_| "n/a".into());
        println!(
            "{name:>12}: AUC {a}, logloss {:.4}, mean prediction {mean:.3} vs click rate {rate:.3}",
            logloss(&scores, &labels)?
        );
    }
    Ok(())
}
