//! Tours the click simulator: one session, the true click probability of a
//! suggestion at each display slot, COO retrieval, and a logged click dataset.
//!
//! `cargo run --release --example simulate -- [seed]`

use gqs::rng;
use gqs::sim::{build_coo, click_log, gen_prompt, logged_lists, World, WorldConfig};

fn main() -> gqs::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let world = World::generate(seed, WorldConfig::default())?;
    for t in 0..world.topic_count() {
        println!("topic {t}: tokens {:?}", world.topic_tokens(t));
    }
    println!("position penalties {:?}", world.position_penalties());

    let sessions = world.query_log(2000, &mut rng::stream(seed, "qlog", 0));
    let dict = build_coo(&sessions);
    println!("COO dictionary: {} keys from {} sessions", dict.len(), sessions.len());

    let mut r = rng::stream(seed, "simulate-example", 0);
    let ctx = gen_prompt(&world, &dict, 2, &mut r);
    println!("\nquery {:?}\nresponse {:?}", ctx.current_query, ctx.assistant_response);
    println!("profile {:?}\nCOO {:?}", ctx.user_profile, ctx.coo_queries);

    let list = world.reference_list(&ctx, 3, &mut r);
    for q in list.queries() {
        let by_slot: Vec<String> = (1..=3)
            .map(|p| Ok(format!("{:.3}", world.true_ctr(q, &ctx, p)?)))
            .collect::<gqs::Result<_>>()?;
        println!("suggestion {q:?}: true CTR by slot {}", by_slot.join(" "));
    }

    let lists = logged_lists(&world, &dict, 2, 700, 3, seed);
    let log = click_log(&world, &lists, "logged", seed)?;
    let clicks = log.iter().filter(|r| r.label == 1).count();
    for p in 1..=3 {
        let at: Vec<_> = log.iter().filter(|r| r.position == p).collect();
        let rate = at.iter().filter(|r| r.label == 1).count() as f64 / at.len() as f64;
        println!("slot {p}: click rate {rate:.3}");
    }
    println!("{} records, {clicks} clicks", log.len());
    Ok(())
}
