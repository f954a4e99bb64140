use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::context::{ContextBundle, Latent};
use crate::ctr::ClickRecord;
use crate::error::{GqsError, Result};
use crate::math::sigmoid;
use crate::rng;
use crate::suggestion::SuggestionList;
use crate::tokens::{TokenSequence, RESERVED};

/// Knobs of the synthetic world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub vocab_size: usize,
    pub topics: usize,
    pub tokens_per_topic: usize,
    /// Probability mass a topic puts on its own core tokens; the rest is generic.
    pub topic_core_mass: f64,
    pub users: usize,
    pub profile_len: usize,
    pub query_len: usize,
    pub response_len: usize,
    pub queries_per_topic: usize,
    pub n_max: usize,
    pub base_logit: f64,
    pub topic_coef: f64,
    pub profile_coef: f64,
    /// Extra logit penalty per display slot below the first.
    pub position_step: f64,
    /// Query mixture of the logged reference suggestions: generic, on-topic,
    /// and (the remainder) off-topic.
    pub reference_generic_mass: f64,
    pub reference_topic_mass: f64,
    /// Probability that a logged follow-up query stays on topic.
    pub follow_up_on_topic: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            topics: 4,
            tokens_per_topic: 8,
            topic_core_mass: 0.8,
            users: 16,
            profile_len: 2,
            query_len: 4,
            response_len: 8,
            queries_per_topic: 24,
            n_max: 8,
            base_logit: -1.0,
            topic_coef: 2.0,
            profile_coef: 1.0,
            position_step: 0.4,
            reference_generic_mass: 0.2,
            reference_topic_mass: 0.5,
            follow_up_on_topic: 0.85,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(GqsError::Config(msg.to_string()));
        if self.vocab_size < 8 {
            return bad("vocab_size must be at least 8");
        }
        if self.topics < 2 {
            return bad("at least two topics are required");
        }
        if self.tokens_per_topic == 0 || RESERVED as usize + self.topics * self.tokens_per_topic > self.vocab_size {
            return bad("topic tokens do not fit in the vocabulary");
        }
        if self.users == 0 || self.query_len == 0 || self.response_len == 0 || self.queries_per_topic == 0 {
            return bad("users, query_len, response_len and queries_per_topic must be positive");
        }
        if self.profile_len == 0 || self.profile_len > self.tokens_per_topic {
            return bad("profile_len must be in [1, tokens_per_topic]");
        }
        if self.n_max == 0 || !(self.position_step > 0.0) {
            return bad("n_max and position_step must be positive");
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.topic_core_mass)
            || !unit(self.follow_up_on_topic)
            || !unit(self.reference_generic_mass)
            || !unit(self.reference_topic_mass)
            || self.reference_generic_mass + self.reference_topic_mass > 1.0
        {
            return bad("mixture weights must be probabilities");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserProfile {
    pub favorite_topic: usize,
    /// Affinity to each topic in [0, 1].
    pub affinity: Vec<f64>,
    pub tokens: TokenSequence,
}

/// Synthetic conversational-search world with known click probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub seed: u64,
    pub config: WorldConfig,
    topic_tokens: Vec<Vec<u32>>,
    generic_tokens: Vec<u32>,
    topic_dists: Vec<Vec<f64>>,
    topic_prior: Vec<f64>,
    users: Vec<UserProfile>,
    position_penalty: Vec<f64>,
    query_bank: Vec<Vec<TokenSequence>>,
    token_topic: Vec<Option<usize>>,
}

fn sample_index(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

impl World {
    /// Deterministic world for `(seed, config)`.
    pub fn generate(seed: u64, config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "world", 0);
        let v = config.vocab_size;
        let mut content: Vec<u32> = (RESERVED..v as u32).collect();
        content.shuffle(&mut rng);
        let topic_tokens: Vec<Vec<u32>> = (0..config.topics)
            .map(|t| content[t * config.tokens_per_topic..(t + 1) * config.tokens_per_topic].to_vec())
            .collect();
        let generic_tokens = content[config.topics * config.tokens_per_topic..].to_vec();

        let mut token_topic = vec![None; v];
        for (t, toks) in topic_tokens.iter().enumerate() {
            for &tok in toks {
                token_topic[tok as usize] = Some(t);
            }
        }

        let core_mass = if generic_tokens.is_empty() {
            1.0
        } else {
            config.topic_core_mass
        };
        let topic_dists = topic_tokens
            .iter()
            .map(|toks| {
                let mut dist = vec![0.0; v];
                let raw: Vec<f64> = toks.iter().map(|_| 0.5 + rng.gen::<f64>()).collect();
                let total: f64 = raw.iter().sum();
                for (&tok, w) in toks.iter().zip(&raw) {
                    dist[tok as usize] = core_mass * w / total;
                }
                for &tok in &generic_tokens {
                    dist[tok as usize] = (1.0 - core_mass) / generic_tokens.len() as f64;
                }
                dist
            })
            .collect::<Vec<_>>();

        let raw_prior: Vec<f64> = (0..config.topics).map(|_| 0.5 + rng.gen::<f64>()).collect();
        let prior_total: f64 = raw_prior.iter().sum();
        let topic_prior = raw_prior.iter().map(|w| w / prior_total).collect();

        let users = (0..config.users)
            .map(|_| {
                let favorite_topic = rng.gen_range(0..config.topics);
                let affinity = (0..config.topics)
                    .map(|t| {
                        if t == favorite_topic {
                            1.0
                        } else {
                            rng.gen_range(0.0..0.2)
                        }
                    })
                    .collect();
                let tokens = TokenSequence::new(topic_tokens[favorite_topic][..config.profile_len].to_vec());
                UserProfile {
                    favorite_topic,
                    affinity,
                    tokens,
                }
            })
            .collect();

        let position_penalty = (0..config.n_max).map(|p| config.position_step * p as f64).collect();

        let mut world = Self {
            seed,
            config,
            topic_tokens,
            generic_tokens,
            topic_dists,
            topic_prior,
            users,
            position_penalty,
            query_bank: Vec::new(),
            token_topic,
        };
        world.query_bank = (0..world.config.topics)
            .map(|t| {
                (0..world.config.queries_per_topic)
                    .map(|_| world.topic_sequence(t, world.config.query_len, &mut rng))
                    .collect()
            })
            .collect();
        Ok(world)
    }

    pub fn topic_count(&self) -> usize {
        self.topic_dists.len()
    }

    /// Token distribution of topic `t` over the whole vocabulary.
    pub fn topic_distribution(&self, t: usize) -> &[f64] {
        &self.topic_dists[t]
    }

    pub fn topic_prior(&self) -> &[f64] {
        &self.topic_prior
    }

    pub fn topic_tokens(&self, t: usize) -> &[u32] {
        &self.topic_tokens[t]
    }

    pub fn generic_tokens(&self) -> &[u32] {
        &self.generic_tokens
    }

    pub fn users(&self) -> &[UserProfile] {
        &self.users
    }

    /// Additive logit penalty `ρ[p]` for 1-based display positions.
    pub fn position_penalties(&self) -> &[f64] {
        &self.position_penalty
    }

    /// The position term entering the click logit, `-ρ[p]`, strictly decreasing in `p`.
    pub fn position_effect(&self, position: usize) -> Result<f64> {
        self.check_position(position)?;
        Ok(-self.position_penalty[position - 1])
    }

    pub fn query_bank(&self, t: usize) -> &[TokenSequence] {
        &self.query_bank[t]
    }

    pub fn topic_of(&self, token: u32) -> Option<usize> {
        self.token_topic.get(token as usize).copied().flatten()
    }

    fn check_position(&self, position: usize) -> Result<()> {
        if position == 0 || position > self.config.n_max {
            return Err(GqsError::PositionOutOfRange {
                position,
                max: self.config.n_max,
            });
        }
        Ok(())
    }

    fn topic_sequence(&self, topic: usize, len: usize, rng: &mut impl Rng) -> TokenSequence {
        TokenSequence::new(
            (0..len)
                .map(|_| sample_index(rng, &self.topic_dists[topic]) as u32)
                .collect(),
        )
    }

    /// Samples a topic from the prior, then a user in proportion to their
    /// affinity for it, and the visible context. The COO slot stays empty
    /// until refilled.
    pub fn session(&self, rng: &mut impl Rng) -> ContextBundle {
        let topic = sample_index(rng, &self.topic_prior);
        let weights: Vec<f64> = self.users.iter().map(|u| u.affinity[topic]).collect();
        let user = sample_index(rng, &weights);
        let bank = &self.query_bank[topic];
        let current_query = bank[rng.gen_range(0..bank.len())].clone();
        let history = bank[rng.gen_range(0..bank.len())].clone();
        let assistant_response = self.topic_sequence(topic, self.config.response_len, rng);
        ContextBundle {
            current_query,
            assistant_response,
            history,
            user_profile: self.users[user].tokens.clone(),
            coo_queries: TokenSequence::empty(),
            latent: Some(Latent { topic, user }),
        }
    }

    /// Mean token score: +1 on the topic's core tokens, -1 on another topic's, 0 otherwise.
    pub fn topic_match(&self, suggestion: &TokenSequence, topic: usize) -> f64 {
        if suggestion.is_empty() {
            return 0.0;
        }
        let total: f64 = suggestion
            .tokens()
            .iter()
            .map(|&t| match self.topic_of(t) {
                Some(tt) if tt == topic => 1.0,
                Some(_) => -1.0,
                None => 0.0,
            })
            .sum();
        total / suggestion.len() as f64
    }

    /// Mean affinity of the user to each token's topic (0 for generic tokens).
    pub fn profile_affinity(&self, suggestion: &TokenSequence, user: usize) -> f64 {
        if suggestion.is_empty() {
            return 0.0;
        }
        let aff = &self.users[user].affinity;
        let total: f64 = suggestion
            .tokens()
            .iter()
            .map(|&t| self.topic_of(t).map_or(0.0, |tt| aff[tt]))
            .sum();
        total / suggestion.len() as f64
    }

    /// Oracle click logit `b + a·match + u·affinity - ρ[p]`.
    pub fn click_logit(&self, suggestion: &TokenSequence, context: &ContextBundle, position: usize) -> Result<f64> {
        self.check_position(position)?;
        let latent = context
            .latent
            .ok_or_else(|| GqsError::InvalidArgument("context carries no latent topic".into()))?;
        Ok(self.config.base_logit
            + self.config.topic_coef * self.topic_match(suggestion, latent.topic)
            + self.config.profile_coef * self.profile_affinity(suggestion, latent.user)
            - self.position_penalty[position - 1])
    }

    /// Ground-truth click probability of a suggestion shown at `position`.
    pub fn true_ctr(&self, suggestion: &TokenSequence, context: &ContextBundle, position: usize) -> Result<f64> {
        Ok(sigmoid(self.click_logit(suggestion, context, position)?))
    }

    /// Mean oracle CTR over the positions of a list.
    pub fn list_ctr(&self, list: &SuggestionList, context: &ContextBundle) -> Result<f64> {
        let mut total = 0.0;
        for (i, q) in list.queries().iter().enumerate() {
            total += self.true_ctr(q, context, i + 1)?;
        }
        Ok(total / list.len().max(1) as f64)
    }

    /// Independent Bernoulli clicks for every position of a displayed list.
    pub fn sample_clicks(
        &self,
        list: &SuggestionList,
        context: &ContextBundle,
        policy_id: &str,
        rng: &mut impl Rng,
    ) -> Result<Vec<ClickRecord>> {
        if list.len() > self.config.n_max {
            return Err(GqsError::InvalidArgument(format!(
                "list of {} exceeds n_max {}",
                list.len(),
                self.config.n_max
            )));
        }
        let response_id = format!("{policy_id}-{:016x}", rng.gen::<u64>());
        list.queries()
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let p = self.true_ctr(q, context, i + 1)?;
                Ok(ClickRecord {
                    context: context.clone(),
                    suggestion: q.clone(),
                    position: i + 1,
                    label: u8::from(rng.gen::<f64>() < p),
                    policy_id: policy_id.to_string(),
                    response_id: response_id.clone(),
                })
            })
            .collect()
    }

    /// A logged reference list. Each query is, as a whole, generic (tokens from
    /// a skewed generic distribution), on the session topic, or on another
    /// topic, following the reference mixture.
    pub fn reference_list(&self, context: &ContextBundle, n: usize, rng: &mut impl Rng) -> SuggestionList {
        let topic = context.latent.map_or(0, |l| l.topic);
        let cfg = &self.config;
        let generic_weights: Vec<f64> = (0..self.generic_tokens.len()).map(|i| 0.5f64.powi(i as i32)).collect();
        let queries = (0..n)
            .map(|_| {
                let u = rng.gen::<f64>();
                let tokens = if u < cfg.reference_generic_mass && !self.generic_tokens.is_empty() {
                    (0..cfg.query_len)
                        .map(|_| self.generic_tokens[sample_index(rng, &generic_weights)])
                        .collect()
                } else {
                    let t = if u < cfg.reference_generic_mass + cfg.reference_topic_mass {
                        topic
                    } else {
                        (topic + rng.gen_range(1..self.topic_count())) % self.topic_count()
                    };
                    (0..cfg.query_len)
                        .map(|_| *self.topic_tokens[t].choose(rng).expect("non-empty"))
                        .collect()
                };
                TokenSequence::new(tokens)
            })
            .collect();
        SuggestionList::new(queries)
    }

    /// Logged `(query, next query)` pairs from simulated search sessions.
    pub fn query_log(&self, sessions: usize, rng: &mut impl Rng) -> Vec<(TokenSequence, TokenSequence)> {
        (0..sessions)
            .map(|_| {
                let topic = sample_index(rng, &self.topic_prior);
                let next_topic = if rng.gen::<f64>() < self.config.follow_up_on_topic {
                    topic
                } else {
                    rng.gen_range(0..self.topic_count())
                };
                let q = self.query_bank[topic].choose(rng).expect("non-empty").clone();
                let next = self.query_bank[next_topic].choose(rng).expect("non-empty").clone();
                (q, next)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::generate(3, WorldConfig::default()).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(world(), world());
        assert_ne!(world(), World::generate(4, WorldConfig::default()).unwrap());
    }

    #[test]
    fn shape_and_normalisation() {
        let w = world();
        assert_eq!(w.topic_count(), 4);
        for t in 0..4 {
            let s: f64 = w.topic_distribution(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let cfg = WorldConfig {
            topics: 3,
            ..WorldConfig::default()
        };
        assert_eq!(World::generate(1, cfg).unwrap().topic_count(), 3);
    }

    #[test]
    fn position_term_is_strictly_decreasing() {
        let w = world();
        let effects: Vec<f64> = (1..=w.config.n_max).map(|p| w.position_effect(p).unwrap()).collect();
        assert!(effects.windows(2).all(|e| e[0] > e[1]));
        assert_eq!(w.position_penalties()[..3], [0.0, 0.4, 0.8]);
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            WorldConfig {
                vocab_size: 7,
                ..Default::default()
            },
            WorldConfig {
                topics: 1,
                ..Default::default()
            },
            WorldConfig {
                tokens_per_topic: 20,
                ..Default::default()
            },
        ] {
            assert!(matches!(World::generate(0, cfg), Err(GqsError::Config(_))));
        }
    }

    #[test]
    fn sessions_are_reproducible_and_in_vocab() {
        let w = world();
        let a = w.session(&mut rng::stream(1, "s", 0));
        let b = w.session(&mut rng::stream(1, "s", 0));
        assert_eq!(a, b);
        assert!(a
            .current_query
            .tokens()
            .iter()
            .all(|&t| (t as usize) < w.config.vocab_size));
        assert!(a.coo_queries.is_empty());
    }

    #[test]
    fn topic_frequencies_match_prior() {
        let w = world();
        let mut rng = rng::stream(9, "topics", 0);
        let mut counts = vec![0usize; w.topic_count()];
        let n = 10_000;
        for _ in 0..n {
            counts[w.session(&mut rng).latent.unwrap().topic] += 1;
        }
        for (c, p) in counts.iter().zip(w.topic_prior()) {
            assert!((*c as f64 / n as f64 - p).abs() <= 0.02, "{c} vs {p}");
        }
    }

    #[test]
    fn true_ctr_fixtures() {
        let w = world();
        let ctx = w.session(&mut rng::stream(2, "s", 0));
        let latent = ctx.latent.unwrap();
        let q = TokenSequence::new(w.topic_tokens(latent.topic)[..4].to_vec());
        assert!(w.true_ctr(&q, &ctx, 1).unwrap() > w.true_ctr(&q, &ctx, 2).unwrap());
        assert!(w.true_ctr(&q, &ctx, 0).is_err());

        // generic tokens: no topic match, no affinity; a position term of -b cancels the base logit
        let generic = TokenSequence::new(vec![w.generic_tokens()[0]; 4]);
        let mut zeroed = w.clone();
        zeroed.position_penalty[0] = zeroed.config.base_logit;
        assert_eq!(zeroed.true_ctr(&generic, &ctx, 1).unwrap(), 0.5);

        // hand-computed logit
        let mixed = TokenSequence::new(vec![
            w.topic_tokens(latent.topic)[0],
            w.topic_tokens((latent.topic + 1) % 4)[0],
            w.generic_tokens()[0],
            w.topic_tokens(latent.topic)[1],
        ]);
        let aff = &w.users()[latent.user].affinity;
        let expected_affinity = (2.0 * aff[latent.topic] + aff[(latent.topic + 1) % 4]) / 4.0;
        let logit = -1.0 + 2.0 * (1.0 / 4.0) + 1.0 * expected_affinity - 0.4;
        assert!((w.click_logit(&mixed, &ctx, 2).unwrap() - logit).abs() < 1e-12);
    }

    #[test]
    fn click_sampling() {
        let w = world();
        let ctx = w.session(&mut rng::stream(2, "s", 0));
        let topic = w.topic_tokens(ctx.latent.unwrap().topic);
        let list = SuggestionList::new(vec![TokenSequence::new(topic[..4].to_vec()); 3]);
        let mut saturated = w.clone();
        saturated.config.base_logit = 800.0;
        let recs = saturated
            .sample_clicks(&list, &ctx, "p0", &mut rng::stream(0, "c", 0))
            .unwrap();
        assert!(recs.iter().all(|r| r.label == 1));
        assert!(recs
            .iter()
            .all(|r| r.response_id == recs[0].response_id && r.policy_id == "p0"));
        assert_eq!(recs.iter().map(|r| r.position).collect::<Vec<_>>(), vec![1, 2, 3]);

        let a = w.sample_clicks(&list, &ctx, "p0", &mut rng::stream(5, "c", 0)).unwrap();
        let b = w.sample_clicks(&list, &ctx, "p0", &mut rng::stream(5, "c", 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn half_probability_clicks_concentrate() {
        let w = world();
        let ctx = w.session(&mut rng::stream(2, "s", 0));
        let generic = TokenSequence::new(vec![w.generic_tokens()[0]; 4]);
        let mut half = w.clone();
        half.position_penalty[0] = half.config.base_logit;
        let list = SuggestionList::new(vec![generic]);
        let mut rng = rng::stream(11, "c", 0);
        let n = 10_000;
        let clicks: usize = (0..n)
            .map(|_| half.sample_clicks(&list, &ctx, "p", &mut rng).unwrap()[0].label as usize)
            .sum();
        let mean = clicks as f64 / n as f64;
        assert!((0.48..=0.52).contains(&mean), "{mean}");
    }
}
