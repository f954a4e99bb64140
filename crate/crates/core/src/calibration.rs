//! Iterative alignment: importance-weighted CTR recalibration, candidate
//! generation, pair construction and one DPO round per iteration.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::context::ContextBundle;
use crate::ctr::{train_ctr, ClickRecord, CtrCheckpoint, CtrConfig, CtrTrainConfig, ResponseWeights};
use crate::dpo::{train_dpo, CurvePoint, DpoConfig, ReferenceMode};
use crate::error::{GqsError, Result};
use crate::metrics::{auc, ctr_uplift, list_relevance, logloss, rubric_diversity, MetricsReport, RubricThresholds};
use crate::policy::{Policy, PolicyCheckpoint};
use crate::prefs::{build_prompt_pairs, score_candidates, PairConfig, PreferencePair};
use crate::rng;
use crate::sim::{gen_prompt, CooDictionary, World};
use crate::suggestion::SuggestionList;

/// `Clip(π_t(Y|x) / π_0(Y|x), 1 − ε, 1 + ε)` from the two log-probabilities.
pub fn clipped_ratio(logprob_t: f64, logprob_0: f64, epsilon: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(GqsError::InvalidArgument(format!("epsilon {epsilon} outside [0, 1)")));
    }
    if !logprob_t.is_finite() || !logprob_0.is_finite() {
        return Err(GqsError::NonFinite(format!(
            "log-probabilities {logprob_t}, {logprob_0}"
        )));
    }
    Ok((logprob_t - logprob_0).exp().clamp(1.0 - epsilon, 1.0 + epsilon))
}

pub fn importance_weight(
    list: &SuggestionList,
    context: &ContextBundle,
    policy_0: &Policy,
    policy_t: &Policy,
    epsilon: f64,
) -> Result<f64> {
    clipped_ratio(
        policy_t.seq_logprob(list, context)?,
        policy_0.seq_logprob(list, context)?,
        epsilon,
    )
}

/// Displayed lists of a click log, one per response id in first-seen order.
pub fn logged_responses(records: &[ClickRecord]) -> Vec<(String, ContextBundle, SuggestionList)> {
    crate::ctr::group_by_response(records)
        .into_iter()
        .map(|g| {
            let list = SuggestionList::new(g.records.iter().map(|r| r.suggestion.clone()).collect());
            (g.response_id.to_string(), g.context().clone(), list)
        })
        .collect()
}

/// One clipped weight per response list of `records`.
pub fn importance_weights(
    records: &[ClickRecord],
    policy_0: &Policy,
    policy_t: &Policy,
    epsilon: f64,
) -> Result<ResponseWeights> {
    let responses = logged_responses(records);
    let items: Vec<(&ContextBundle, &SuggestionList)> = responses.iter().map(|(_, c, l)| (c, l)).collect();
    let lp_0 = policy_0.seq_logprobs(&items)?;
    let lp_t = policy_t.seq_logprobs(&items)?;
    let mut out = ResponseWeights::new();
    for ((id, _, _), (t, z)) in responses.iter().zip(lp_t.iter().zip(&lp_0)) {
        let w = clipped_ratio(*t, *z, epsilon)?;
        debug_assert!(w >= 1.0 - epsilon && w <= 1.0 + epsilon);
        out.insert(id.clone(), w);
    }
    Ok(out)
}

/// Counts of weights in equal-width bins over `[1 − ε, 1 + ε]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightHistogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl WeightHistogram {
    pub fn new(weights: &ResponseWeights, epsilon: f64, bins: usize) -> Self {
        let (lo, hi) = (1.0 - epsilon, 1.0 + epsilon);
        let bins = if epsilon == 0.0 { 1 } else { bins.max(1) };
        let mut counts = vec![0; bins];
        let mut values: Vec<f64> = weights.values().copied().collect();
        values.sort_by(f64::total_cmp);
        for &w in &values {
            let b = if hi > lo {
                ((w - lo) / (hi - lo) * bins as f64) as usize
            } else {
                0
            };
            counts[b.min(bins - 1)] += 1;
        }
        let n = values.len().max(1) as f64;
        Self {
            lo,
            hi,
            counts,
            mean: values.iter().sum::<f64>() / n,
            min: values.first().copied().unwrap_or(1.0),
            max: values.last().copied().unwrap_or(1.0),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        for (i, c) in self.counts.iter().enumerate() {
            let a = self.lo + width * i as f64;
            out.push_str(&format!("{:.6},{:.6},{c}\n", a, a + width));
        }
        let mut f = std::fs::File::create(path).map_err(|e| GqsError::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| GqsError::io(path, e))
    }
}

/// SHA-256 over the JSON lines of a click log.
pub fn dataset_hash(records: &[ClickRecord]) -> Result<String> {
    let mut h = Sha256::new();
    for r in records {
        h.update(serde_json::to_vec(r)?);
        h.update(b"\n");
    }
    Ok(format!("{:x}", h.finalize()))
}

/// The simulator side of a run: world, COO dictionary and retrieval depth.
#[derive(Clone, Copy)]
pub struct Simulation<'a> {
    pub world: &'a World,
    pub dict: &'a CooDictionary,
    pub coo_k: usize,
}

impl Simulation<'_> {
    pub fn prompt(&self, seed: u64, label: &str, index: u64) -> ContextBundle {
        gen_prompt(self.world, self.dict, self.coo_k, &mut rng::stream(seed, label, index))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    /// Suggestions per list.
    pub n: usize,
    /// Candidates per prompt.
    pub m: usize,
    pub prompts_per_round: usize,
    pub temperature: f64,
    pub epsilon: f64,
    pub eval_prompts: usize,
    /// Never recalibrate the CTR model.
    pub fixed_ctr: bool,
    /// Reuse the round-0 alignment prompts every round.
    pub fixed_prompts: bool,
    pub relevance: RubricThresholds,
    pub pairs: PairConfig,
    pub dpo: DpoConfig,
    pub ctr_model: CtrConfig,
    pub ctr_train: CtrTrainConfig,
    pub seed: u64,
}

impl LoopConfig {
    pub fn for_list_len(n: usize) -> Self {
        Self {
            n,
            m: 8,
            prompts_per_round: 200,
            temperature: 1.0,
            epsilon: 0.2,
            eval_prompts: 300,
            fixed_ctr: false,
            fixed_prompts: false,
            relevance: RubricThresholds::default(),
            pairs: PairConfig::for_list_len(n),
            dpo: DpoConfig::default(),
            ctr_model: CtrConfig::default(),
            ctr_train: CtrTrainConfig::default(),
            seed: 0,
        }
    }
}

/// Everything the loop carries from one round to the next.
#[derive(Clone, Debug)]
pub struct IterationState {
    pub round: usize,
    /// Policies of rounds `0..=round`.
    pub policies: Vec<PolicyCheckpoint>,
    /// CTR model that scored the most recent round's candidates.
    pub ctr: CtrCheckpoint,
    pub d_ctr: Vec<ClickRecord>,
    pub d_ctr_hash: String,
    /// One row per round, `0..=round`.
    pub metrics: Vec<MetricsReport>,
}

impl IterationState {
    /// Round-0 state: the supervised policy, the CTR model trained on the log,
    /// and the baseline evaluation.
    pub fn start(
        sim: Simulation,
        policy_0: PolicyCheckpoint,
        ctr: CtrCheckpoint,
        d_ctr: Vec<ClickRecord>,
        config: &LoopConfig,
    ) -> Result<Self> {
        let metrics = vec![evaluate(sim, &policy_0.policy, &ctr, config, 0, None)?];
        Ok(Self {
            round: 0,
            policies: vec![policy_0],
            d_ctr_hash: dataset_hash(&d_ctr)?,
            ctr,
            d_ctr,
            metrics,
        })
    }

    pub fn current(&self) -> &PolicyCheckpoint {
        self.policies.last().expect("round-0 policy")
    }

    pub fn check(&self) -> Result<()> {
        if self.metrics.len() != self.round + 1 || self.policies.len() != self.round + 1 {
            return Err(GqsError::InvalidArgument(format!(
                "state at round {} holds {} policies and {} metric rows",
                self.round,
                self.policies.len(),
                self.metrics.len()
            )));
        }
        if let Some((i, p)) = self.policies.iter().enumerate().find(|(i, p)| p.round != *i) {
            return Err(GqsError::InvalidArgument(format!(
                "policy {i} records round {}",
                p.round
            )));
        }
        if dataset_hash(&self.d_ctr)? != self.d_ctr_hash {
            return Err(GqsError::InvalidArgument("the CTR dataset changed".into()));
        }
        Ok(())
    }
}

/// CTR model retrained on the fixed log with weights `π_t / π_0`.
pub fn recalibrate_ctr(state: &IterationState, config: &LoopConfig) -> Result<(CtrCheckpoint, WeightHistogram)> {
    if state.round == 0 {
        return Err(GqsError::InvalidArgument("recalibration starts at round 1".into()));
    }
    let weights = importance_weights(
        &state.d_ctr,
        &state.policies[0].policy,
        &state.current().policy,
        config.epsilon,
    )?;
    let hist = WeightHistogram::new(&weights, config.epsilon, 10);
    let ckpt = train_ctr(&state.d_ctr, Some(&weights), &config.ctr_model, &config.ctr_train, None)?;
    Ok((ckpt, hist))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub prompts: usize,
    pub ctr_pairs: usize,
    pub div_pairs: usize,
    pub no_chosen: usize,
    pub mean_candidate_reward: f64,
}

/// Artifacts of one completed iteration.
#[derive(Clone, Debug)]
pub struct RoundOutput {
    pub pairs: Vec<PreferencePair>,
    pub curve: Vec<CurvePoint>,
    pub weights: Option<WeightHistogram>,
    pub stats: RoundStats,
}

/// Alignment prompts of round `round`.
pub fn round_prompts(sim: Simulation, config: &LoopConfig, round: usize) -> Vec<ContextBundle> {
    let r = if config.fixed_prompts { 0 } else { round as u64 };
    (0..config.prompts_per_round)
        .map(|i| sim.prompt(config.seed, "prompts", (r << 32) | i as u64))
        .collect()
}

/// Samples candidates with the current policy and builds the round's pairs.
pub fn build_round_pairs(
    sim: Simulation,
    policy: &Policy,
    ctr: &CtrCheckpoint,
    config: &LoopConfig,
    round: usize,
) -> Result<(Vec<PreferencePair>, RoundStats)> {
    let prompts = round_prompts(sim, config, round);
    let mut pairs = Vec::new();
    let mut stats = RoundStats {
        prompts: prompts.len(),
        ..RoundStats::default()
    };
    let mut reward_sum = 0.0;
    for (i, ctx) in prompts.iter().enumerate() {
        let mut r = rng::stream(config.seed, "candidates", ((round as u64) << 32) | i as u64);
        let lists: Vec<SuggestionList> = policy
            .generate(ctx, config.m, config.n, config.temperature, &mut r)?
            .into_iter()
            .map(|g| g.list)
            .collect();
        let cands = score_candidates(lists, ctx, &ctr.model, config.pairs.theta_sim)?;
        reward_sum += cands.iter().map(|c| c.reward).sum::<f64>();
        let pp = build_prompt_pairs(&format!("r{round}-p{i}"), ctx, &cands, &config.pairs)?;
        stats.no_chosen += usize::from(pp.no_chosen);
        if let Some(p) = pp.ctr {
            stats.ctr_pairs += 1;
            pairs.push(p);
        }
        if let Some(p) = pp.div {
            stats.div_pairs += 1;
            pairs.push(p);
        }
    }
    stats.mean_candidate_reward = reward_sum / (prompts.len() * config.m).max(1) as f64;
    Ok((pairs, stats))
}

/// Greedy lists of `policy` on the fixed evaluation prompts, scored by the
/// simulator; AUC and logloss are those of `ctr` on clicks of those lists.
pub fn evaluate(
    sim: Simulation,
    policy: &Policy,
    ctr: &CtrCheckpoint,
    config: &LoopConfig,
    round: usize,
    baseline_ctr: Option<f64>,
) -> Result<MetricsReport> {
    let (mut oracle, mut rel, mut div) = (0.0, 0.0, 0.0);
    let mut records = Vec::new();
    for i in 0..config.eval_prompts {
        let ctx = sim.prompt(config.seed, "eval", i as u64);
        let list = policy
            .generate(&ctx, 1, config.n, 0.0, &mut rng::stream(0, "greedy", 0))?
            .remove(0)
            .list;
        oracle += sim.world.list_ctr(&list, &ctx)?;
        rel += list_relevance(&list, &ctx, config.relevance);
        div += rubric_diversity(&list, &ctx, config.pairs.theta_sim);
        let mut r = rng::stream(config.seed, "eval-clicks", ((round as u64) << 32) | i as u64);
        records.extend(sim.world.sample_clicks(&list, &ctx, "eval", &mut r)?);
    }
    let count = config.eval_prompts.max(1) as f64;
    let oracle_ctr = oracle / count;
    let scores = ctr.model.score_records(&records)?;
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let auc = match auc(&scores, &labels) {
        Ok(a) => a,
        Err(GqsError::SingleClass) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        round,
        oracle_ctr,
        ctr_uplift_pct: match baseline_ctr {
            Some(b) => ctr_uplift(oracle_ctr, b)?,
            None => 0.0,
        },
        relevance: 100.0 * rel / count,
        diversity: 100.0 * div / count,
        auc,
        logloss: logloss(&scores, &labels)?,
    })
}

/// Advances `state` by one round. On error the state is left untouched.
pub fn run_iteration(
    sim: Simulation,
    state: &IterationState,
    config: &LoopConfig,
) -> Result<(IterationState, RoundOutput)> {
    state.check()?;
    let t = state.round;
    let (ctr, weights) = if t == 0 || config.fixed_ctr {
        (state.ctr.clone(), None)
    } else {
        let (c, h) = recalibrate_ctr(state, config)?;
        (c, Some(h))
    };
    let policy_t = state.current();
    let (pairs, stats) = build_round_pairs(sim, &policy_t.policy, &ctr, config, t)?;
    if pairs.is_empty() {
        return Err(GqsError::InvalidArgument(format!(
            "round {t} produced no preference pairs"
        )));
    }
    let reference = match config.dpo.reference {
        ReferenceMode::Previous => None,
        ReferenceMode::RoundZero => Some(&state.policies[0].policy),
    };
    let dpo = DpoConfig {
        seed: config.seed,
        ..config.dpo.clone()
    };
    let (next, curve) = train_dpo(&pairs, policy_t, reference, &dpo)?;
    let baseline = state.metrics[0].oracle_ctr;
    let row = evaluate(sim, &next.policy, &ctr, config, t + 1, Some(baseline))?;
    let mut out = state.clone();
    out.round = t + 1;
    out.policies.push(next);
    out.ctr = ctr;
    out.metrics.push(row);
    out.check()?;
    Ok((
        out,
        RoundOutput {
            pairs,
            curve,
            weights,
            stats,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;
    use crate::testutil::{records, seq};

    fn policy(seed: u64) -> Policy {
        let config = PolicyConfig {
            vocab_size: 24,
            d_model: 8,
            heads: 2,
            d_ff: 12,
            layers: 1,
            max_len: 24,
            max_query_len: 3,
            max_response_tokens: None,
            decode_retries: 2,
        };
        Policy::new(config, &mut rng::stream(seed, "cal", 0))
    }

    #[test]
    fn clip_fixtures() {
        assert_eq!(clipped_ratio(1.5f64.ln(), 0.0, 0.2).unwrap(), 1.2);
        assert_eq!(clipped_ratio(0.5f64.ln(), 0.0, 0.2).unwrap(), 0.8);
        assert_eq!(clipped_ratio(-3.0, -3.0, 0.2).unwrap(), 1.0);
        assert_eq!(clipped_ratio(-1.0, -7.0, 0.0).unwrap(), 1.0);
        assert!(clipped_ratio(-1.0, 0.0, 1.0).is_err());
        assert!(matches!(clipped_ratio(f64::NAN, 0.0, 0.2), Err(GqsError::NonFinite(_))));
    }

    #[test]
    fn weights_identity_and_bounds() {
        let recs = records();
        let (p0, p1) = (policy(1), policy(2));
        let same = importance_weights(&recs, &p0, &p0, 0.2).unwrap();
        assert_eq!(same.len(), 2);
        assert!(same.values().all(|w| *w == 1.0));
        let flat = importance_weights(&recs, &p0, &p1, 0.0).unwrap();
        assert!(flat.values().all(|w| *w == 1.0));
        let moved = importance_weights(&recs, &p0, &p1, 0.2).unwrap();
        assert!(moved.values().all(|w| (0.8..=1.2).contains(w)));
        let hist = WeightHistogram::new(&moved, 0.2, 10);
        assert_eq!(hist.counts.iter().sum::<usize>(), 2);
        assert!(hist.min >= 0.8 && hist.max <= 1.2);

        let (_, ctx, list) = &logged_responses(&recs)[0];
        assert_eq!(list.queries(), &[seq(&[17, 18]), seq(&[19])]);
        let w = importance_weight(list, ctx, &p0, &p1, 0.2).unwrap();
        assert_eq!(w, moved["r0"]);
    }

    #[test]
    fn dataset_hash_tracks_content() {
        let recs = records();
        let h = dataset_hash(&recs).unwrap();
        assert_eq!(h, dataset_hash(&recs.clone()).unwrap());
        let mut flipped = recs.clone();
        flipped[0].label ^= 1;
        assert_ne!(h, dataset_hash(&flipped).unwrap());
    }
}
