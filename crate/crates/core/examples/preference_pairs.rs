//! Samples candidate lists from a supervised policy, scores them with the CTR
//! model and the diversity rubric, and shows which pairs get built.
//!
//! `cargo run --release --example preference_pairs -- [seed]`

use gqs::config::RunConfig;
use gqs::ctr::train_ctr;
use gqs::pipeline::{click_dataset, sft_dataset, Environment};
use gqs::policy::sft_train;
use gqs::prefs::{build_prompt_pairs, score_candidates, select_rejected, CandidateStats};
use gqs::rng;

fn main() -> gqs::Result<()> {
    let mut config = RunConfig {
        seed: std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1),
        ..RunConfig::default()
    };
    config.apply_overrides(["data.sft_lists=400", "sft.epochs=4"])?;

    let env = Environment::new(&config)?;
    let policy = sft_train(
        &sft_dataset(&config, &env),
        &config.policy_config(),
        &config.sft_config(),
        "example",
    )?
    .policy;
    let ctr = train_ctr(
        &click_dataset(&config, &env)?,
        None,
        &config.ctr_config(),
        &config.ctr_train_config(),
        None,
    )?;

    let lc = config.loop_config();
    let mut totals = (0, 0, 0);
    for i in 0..40 {
        let ctx = env.sim().prompt(config.seed, "pairs-example", i);
        let mut r = rng::stream(config.seed, "pairs-example-candidates", i);
        let lists = policy
            .generate(&ctx, lc.m, lc.n, lc.temperature, &mut r)?
            .into_iter()
            .map(|g| g.list)
            .collect();
        let cands = score_candidates(lists, &ctx, &ctr.model, lc.pairs.theta_sim)?;
        let pp = build_prompt_pairs(&format!("p{i}"), &ctx, &cands, &lc.pairs)?;
        totals.0 += usize::from(pp.ctr.is_some());
        totals.1 += usize::from(pp.div.is_some());
        totals.2 += usize::from(pp.no_chosen);
        if i > 0 {
            continue;
        }
        let rewards: Vec<f64> = cands.iter().map(|c| c.reward).collect();
        let stats = CandidateStats::of(&rewards);
        println!("prompt 0: reward mean {:.3}, sd {:.3}", stats.mean, stats.stddev);
        for (k, c) in cands.iter().enumerate() {
            let oracle = env.world.list_ctr(&c.list, &ctx)?;
            println!(
                "  #{k} reward {:.3} diversity {:.2} oracle {:.3} {:?}",
                c.reward, c.diversity, oracle, c.list
            );
        }
        println!("  rejected index {}", select_rejected(&cands)?);
        if let Some(p) = &pp.ctr {
            println!("  ctr pair: alpha {:.3}, reward gap {:.3}", p.weight, p.reward_gap);
        }
        if let Some(p) = &pp.div {
            println!("  div pair: reward gap {:.3}", p.reward_gap);
        }
    }
    println!(
        "40 prompts: {} ctr pairs, {} div pairs, {} without a chosen list",
        totals.0, totals.1, totals.2
    );
    Ok(())
}
