//! Supervised fine-tuning of the suggestion policy on logged reference lists,
//! then a look at what it generates and how often simulated users click.
//!
//! `cargo run --release --example sft -- [seed]`

use std::time::Instant;

use gqs::policy::{mean_nll, sft_train, PolicyConfig, SftConfig};
use gqs::rng;
use gqs::sim::{build_coo, logged_lists, World, WorldConfig};

fn main() -> gqs::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let world = World::generate(seed, WorldConfig::default())?;
    let dict = build_coo(&world.query_log(2000, &mut rng::stream(seed, "qlog", 0)));
    let data = logged_lists(&world, &dict, 2, 1000, 3, seed);
    let longest = data.iter().map(|(c, _)| c.prompt_tokens().len()).max().unwrap_or(0);
    println!("{} lists, longest prompt {longest} tokens", data.len());

    let start = Instant::now();
    let ckpt = sft_train(
        &data,
        &PolicyConfig::default(),
        &SftConfig {
            seed,
            ..SftConfig::default()
        },
        "example",
    )?;
    println!(
        "SFT in {:.1?}, train NLL {:.3}",
        start.elapsed(),
        mean_nll(&ckpt.policy, &data)?
    );

    let prompts = logged_lists(&world, &dict, 2, 200, 3, seed + 1000);
    let mut r = rng::stream(seed, "sample", 0);
    let (mut greedy, mut sampled, mut reference) = (0.0, 0.0, 0.0);
    for (i, (ctx, list)) in prompts.iter().enumerate() {
        let g = &ckpt.policy.generate(ctx, 1, 3, 0.0, &mut r)?[0];
        let s = &ckpt.policy.generate(ctx, 1, 3, 1.0, &mut r)?[0];
        if i < 3 {
            println!("greedy {:?}\nsampled {:?}", g.list, s.list);
        }
        greedy += world.list_ctr(&g.list, ctx)?;
        sampled += world.list_ctr(&s.list, ctx)?;
        reference += world.list_ctr(list, ctx)?;
    }
    let n = prompts.len() as f64;
    println!(
        "mean list CTR: greedy {:.3}, sampled {:.3}, reference {:.3}",
        greedy / n,
        sampled / n,
        reference / n
    );
    Ok(())
}
