//! Synthetic conversational-search world: the verification oracle.
//!
//! The world knows every suggestion's true click probability. It produces
//! sessions, logged reference suggestions, Bernoulli click logs with an
//! additive position penalty, and query logs for the COO dictionary.

mod coo;
mod world;

use rand::Rng;

pub use coo::{build_coo, retrieve_coo, CooDictionary, CooEntry};
pub use world::{UserProfile, World, WorldConfig};

use crate::context::ContextBundle;
use crate::ctr::ClickRecord;
use crate::error::Result;
use crate::suggestion::SuggestionList;
use crate::tokens::TokenSequence;

pub fn gen_world(seed: u64, config: WorldConfig) -> Result<World> {
    World::generate(seed, config)
}

pub fn gen_session(world: &World, rng: &mut impl Rng) -> ContextBundle {
    world.session(rng)
}

pub fn true_ctr(suggestion: &TokenSequence, context: &ContextBundle, position: usize, world: &World) -> Result<f64> {
    world.true_ctr(suggestion, context, position)
}

pub fn sample_clicks(
    list: &SuggestionList,
    context: &ContextBundle,
    world: &World,
    policy_id: &str,
    rng: &mut impl Rng,
) -> Result<Vec<ClickRecord>> {
    world.sample_clicks(list, context, policy_id, rng)
}

/// A session whose COO slot has been refilled from `dict`.
pub fn gen_prompt(world: &World, dict: &CooDictionary, coo_k: usize, rng: &mut impl Rng) -> ContextBundle {
    let mut ctx = world.session(rng);
    dict.refill(&mut ctx, coo_k);
    ctx
}

/// `count` logged sessions with COO refill, each paired with the logging
/// policy's reference list of `n` suggestions.
pub fn logged_lists(
    world: &World,
    dict: &CooDictionary,
    coo_k: usize,
    count: usize,
    n: usize,
    seed: u64,
) -> Vec<(ContextBundle, SuggestionList)> {
    (0..count)
        .map(|i| {
            let mut rng = crate::rng::stream(seed, "logged", i as u64);
            let ctx = gen_prompt(world, dict, coo_k, &mut rng);
            let list = world.reference_list(&ctx, n, &mut rng);
            (ctx, list)
        })
        .collect()
}

/// Click log over `lists`, with one fresh response id per list.
pub fn click_log(
    world: &World,
    lists: &[(ContextBundle, SuggestionList)],
    policy_id: &str,
    seed: u64,
) -> Result<Vec<ClickRecord>> {
    let mut out = Vec::new();
    for (i, (ctx, list)) in lists.iter().enumerate() {
        let mut rng = crate::rng::stream(seed, "clicks", i as u64);
        out.extend(world.sample_clicks(list, ctx, policy_id, &mut rng)?);
    }
    Ok(out)
}
