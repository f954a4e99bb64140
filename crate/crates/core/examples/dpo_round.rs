//! One round of CTR-weighted, diversity-aware DPO from a supervised policy:
//! margins before and after, the loss curve, and the oracle CTR of greedy lists.
//!
//! `cargo run --release --example dpo_round -- [seed] [lr]`

use gqs::calibration::{build_round_pairs, evaluate};
use gqs::config::RunConfig;
use gqs::ctr::train_ctr;
use gqs::dpo::{margins, train_dpo};
use gqs::pipeline::{click_dataset, sft_dataset, Environment};
use gqs::policy::sft_train;
use gqs::prefs::PairKind;

fn main() -> gqs::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut config = RunConfig {
        seed: args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1),
        ..RunConfig::default()
    };
    if let Some(lr) = args.get(2) {
        config.set("dpo.lr", lr)?;
    }
    config.apply_overrides(["loop.eval_prompts=150"])?;

    let env = Environment::new(&config)?;
    let sft = sft_train(
        &sft_dataset(&config, &env),
        &config.policy_config(),
        &config.sft_config(),
        "example",
    )?;
    let ctr = train_ctr(
        &click_dataset(&config, &env)?,
        None,
        &config.ctr_config(),
        &config.ctr_train_config(),
        None,
    )?;
    let lc = config.loop_config();

    let (pairs, stats) = build_round_pairs(env.sim(), &sft.policy, &ctr, &lc, 0)?;
    println!("{stats:?}");
    let (ckpt, curve) = train_dpo(&pairs, &sft, None, &lc.dpo)?;
    for p in curve.iter().step_by(10) {
        println!(
            "step {:>3} combined {:.4} ctr {:.4} div {:.4} margin {:+.4}",
            p.step, p.combined, p.ctr_term, p.div_term, p.mean_margin
        );
    }

    let after = margins(&ckpt.policy, &sft.policy, &pairs, lc.dpo.beta)?;
    let positive = after.iter().filter(|&&m| m > 0.0).count();
    println!("margins positive on {positive}/{} pairs", pairs.len());
    let div = pairs.iter().filter(|p| p.kind == PairKind::Div).count();
    println!("{} ctr pairs, {div} div pairs", pairs.len() - div);

    let before = evaluate(env.sim(), &sft.policy, &ctr, &lc, 0, None)?;
    let now = evaluate(env.sim(), &ckpt.policy, &ctr, &lc, 1, Some(before.oracle_ctr))?;
    println!(
        "oracle CTR {:.3} -> {:.3} ({:+.1}%)",
        before.oracle_ctr, now.oracle_ctr, now.ctr_uplift_pct
    );
    println!("diversity {:.1} -> {:.1}", before.diversity, now.diversity);
    Ok(())
}
