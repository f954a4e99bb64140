//! Runs the full loop on the default world: supervised baseline, CTR model on
//! the logged clicks, then calibrated DPO rounds, printing metrics per round.
//!
//! `cargo run --release --example iterate -- [seed] [rounds] [fixed|lambda0]`

use std::time::Instant;

use gqs::calibration::{run_iteration, IterationState, LoopConfig, Simulation};
use gqs::ctr::train_ctr;
use gqs::policy::{sft_train, PolicyConfig, SftConfig};
use gqs::rng;
use gqs::sim::{build_coo, click_log, logged_lists, World, WorldConfig};

fn main() -> gqs::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let rounds = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let mut config = LoopConfig {
        seed,
        ..LoopConfig::for_list_len(3)
    };
    config.ctr_train.seed = seed;
    match args.get(3).map(String::as_str) {
        Some("fixed") => config.fixed_ctr = true,
        Some("lambda0") => config.dpo.lambda = 0.0,
        _ => {}
    }

    let start = Instant::now();
    let world = World::generate(seed, WorldConfig::default())?;
    let dict = build_coo(&world.query_log(2000, &mut rng::stream(seed, "qlog", 0)));
    let sim = Simulation {
        world: &world,
        dict: &dict,
        coo_k: 2,
    };
    let logged = logged_lists(&world, &dict, 2, 700, config.n, seed);
    let d_ctr = click_log(&world, &logged, "logged", seed)?;
    let sft_data = logged_lists(&world, &dict, 2, 1000, config.n, seed + 7919);
    let policy_0 = sft_train(
        &sft_data,
        &PolicyConfig::default(),
        &SftConfig {
            seed,
            ..SftConfig::default()
        },
        "example",
    )?;
    let ctr = train_ctr(&d_ctr, None, &config.ctr_model, &config.ctr_train, None)?;
    let mut state = IterationState::start(sim, policy_0, ctr, d_ctr, &config)?;
    println!("round 0 after {:.1?}: {:?}", start.elapsed(), state.metrics[0]);
    for _ in 0..rounds {
        let (next, out) = run_iteration(sim, &state, &config)?;
        state = next;
        println!(
            "round {} after {:.1?}: {:?}\n  {:?} weights {:?}",
            state.round,
            start.elapsed(),
            state.metrics.last().unwrap(),
            out.stats,
            out.weights.map(|w| (w.min, w.mean, w.max))
        );
    }
    Ok(())
}
