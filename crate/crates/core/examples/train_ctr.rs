//! Simulates a click log on the default world, fits the CTR model, and checks
//! it against the simulator's true click probabilities on a fresh log.
//!
//! `cargo run --release --example train_ctr -- [seed]`

use std::time::Instant;

use gqs::ctr::{train_ctr, CtrConfig, CtrTrainConfig};
use gqs::metrics::{auc, spearman};
use gqs::rng;
use gqs::sim::{build_coo, click_log, logged_lists, World, WorldConfig};

fn main() -> gqs::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let world = World::generate(seed, WorldConfig::default())?;
    let dict = build_coo(&world.query_log(2000, &mut rng::stream(seed, "qlog", 0)));
    let lists = logged_lists(&world, &dict, 2, 700, 3, seed);
    let records = click_log(&world, &lists, "logged", seed)?;
    let rate = records.iter().map(|r| r.label as f64).sum::<f64>() / records.len() as f64;
    println!("{} records, click rate {rate:.3}", records.len());

    let start = Instant::now();
    let config = CtrTrainConfig {
        seed,
        ..CtrTrainConfig::default()
    };
    let ckpt = train_ctr(&records, None, &CtrConfig::default(), &config, None)?;
    println!("trained in {:.1?}", start.elapsed());
    println!(
        "validation AUC {:?}, logloss {:?}",
        ckpt.report.validation_auc, ckpt.report.validation_logloss
    );

    let held = logged_lists(&world, &dict, 2, 600, 3, seed + 1000);
    let log = click_log(&world, &held, "logged", seed + 1000)?;
    let labels: Vec<u8> = log.iter().map(|r| r.label).collect();
    let predicted = ckpt.model.score_records(&log)?;
    let truth: Vec<f64> = log
        .iter()
        .map(|r| world.true_ctr(&r.suggestion, &r.context, r.position))
        .collect::<gqs::Result<_>>()?;
    println!(
        "held-out AUC {:.3} (true CTR scores {:.3})",
        auc(&predicted, &labels)?,
        auc(&truth, &labels)?
    );
    println!("spearman against true CTR {:.3}", spearman(&predicted, &truth)?);
    Ok(())
}
