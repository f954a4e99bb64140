//! Candidate scoring and preference-pair construction.
//!
//! Every candidate list gets a reward (the sum of its predicted CTRs) and a
//! rubric diversity score. CTR pairs take the best sufficiently diverse
//! candidate against one from the low tail of the reward distribution;
//! diversity pairs take two candidates of similar reward whose diversity
//! differs by a wide margin.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::ContextBundle;
use crate::ctr::CtrModel;
use crate::dpo::ctr_weight;
use crate::error::{GqsError, Result};
use crate::similarity::cosine;
use crate::suggestion::SuggestionList;
use crate::tokens::TokenSequence;

/// Sum of the predicted CTRs of a list; lies in `(0, N)`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct ResponseReward(f64);

impl ResponseReward {
    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct DiversityScore(f64);

impl DiversityScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Mean and population standard deviation of one prompt's candidate rewards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidateStats {
    pub mean: f64,
    pub stddev: f64,
}

impl CandidateStats {
    pub fn of(rewards: &[f64]) -> Self {
        if rewards.is_empty() {
            return Self { mean: 0.0, stddev: 0.0 };
        }
        let n = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            stddev: var.sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Ctr,
    Div,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub prompt_id: String,
    pub context: ContextBundle,
    pub chosen: SuggestionList,
    pub rejected: SuggestionList,
    pub kind: PairKind,
    /// `α` for CTR pairs, 1 for diversity pairs.
    pub weight: f64,
    pub reward_gap: f64,
}

/// A generated list with its reward and diversity.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredCandidate {
    pub list: SuggestionList,
    pub reward: f64,
    pub diversity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    /// Minimum diversity for a chosen CTR candidate.
    pub delta: f64,
    /// Minimum diversity gap of a diversity pair.
    pub div_delta: f64,
    /// Maximum reward gap of a diversity pair.
    pub reward_tol: f64,
    pub theta_sim: f64,
    pub gamma: f64,
}

impl PairConfig {
    /// Defaults for lists of `n` suggestions.
    pub fn for_list_len(n: usize) -> Self {
        Self {
            delta: 0.5,
            div_delta: 0.5,
            reward_tol: 0.05 * n as f64,
            theta_sim: 0.85,
            gamma: 1.0,
        }
    }
}

pub fn score_response(list: &SuggestionList, context: &ContextBundle, model: &CtrModel) -> Result<ResponseReward> {
    Ok(ResponseReward(
        model.score_list(context, list)?.iter().map(|s| s.value()).sum(),
    ))
}

fn exclusive(a: &TokenSequence, b: &TokenSequence, theta_sim: f64) -> bool {
    cosine(a, b) < theta_sim
}

/// Mean per-query rubric: a query earns 1.0 when it is exclusive from the
/// user query, the assistant response and its siblings, 0.5 when exactly
/// two of those hold, 0 otherwise.
pub fn diversity_score(list: &SuggestionList, context: &ContextBundle, theta_sim: f64) -> DiversityScore {
    let qs = list.queries();
    if qs.is_empty() {
        return DiversityScore(0.0);
    }
    let total: f64 = qs
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let checks = [
                exclusive(q, &context.current_query, theta_sim),
                exclusive(q, &context.assistant_response, theta_sim),
                qs.iter()
                    .enumerate()
                    .all(|(j, other)| i == j || exclusive(q, other, theta_sim)),
            ];
            match checks.iter().filter(|c| **c).count() {
                3 => 1.0,
                2 => 0.5,
                _ => 0.0,
            }
        })
        .sum();
    DiversityScore(total / qs.len() as f64)
}

/// Rewards and diversities for every candidate of one prompt.
pub fn score_candidates(
    lists: Vec<SuggestionList>,
    context: &ContextBundle,
    model: &CtrModel,
    theta_sim: f64,
) -> Result<Vec<ScoredCandidate>> {
    let items: Vec<(&ContextBundle, &SuggestionList)> = lists.iter().map(|l| (context, l)).collect();
    let scores = model.score_lists(&items)?;
    Ok(lists
        .into_iter()
        .zip(scores)
        .map(|(list, s)| {
            let diversity = diversity_score(&list, context, theta_sim).value();
            ScoredCandidate {
                reward: s.iter().map(|c| c.value()).sum(),
                diversity,
                list,
            }
        })
        .collect())
}

fn need_two(candidates: &[ScoredCandidate]) -> Result<()> {
    if candidates.len() < 2 {
        return Err(GqsError::InvalidArgument(format!(
            "{} candidates; pair construction needs at least 2",
            candidates.len()
        )));
    }
    Ok(())
}

/// Index of the highest-reward candidate whose diversity reaches `delta`.
pub fn select_chosen(candidates: &[ScoredCandidate], delta: f64) -> Result<usize> {
    need_two(candidates)?;
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if c.diversity >= delta && best.is_none_or(|b| c.reward > candidates[b].reward) {
            best = Some(i);
        }
    }
    best.ok_or(GqsError::NoChosen)
}

/// Index of the lowest-reward candidate below `μ − 2σ`, or of the lowest
/// reward overall when none is that far down.
pub fn select_rejected(candidates: &[ScoredCandidate]) -> Result<usize> {
    need_two(candidates)?;
    let rewards: Vec<f64> = candidates.iter().map(|c| c.reward).collect();
    let stats = CandidateStats::of(&rewards);
    let threshold = stats.mean - 2.0 * stats.stddev;
    let lowest = |eligible: &dyn Fn(f64) -> bool| {
        let mut best: Option<usize> = None;
        for (i, &r) in rewards.iter().enumerate() {
            if eligible(r) && best.is_none_or(|b| r < rewards[b]) {
                best = Some(i);
            }
        }
        best
    };
    Ok(lowest(&|r| r < threshold)
        .or_else(|| lowest(&|_| true))
        .expect("at least two candidates"))
}

/// The diversity pair `(chosen, rejected)` with the widest diversity gap
/// among candidates whose rewards lie within `reward_tol`, if any.
pub fn build_div_pairs(candidates: &[ScoredCandidate], delta: f64, reward_tol: f64) -> Result<Option<(usize, usize)>> {
    need_two(candidates)?;
    let mut best: Option<(usize, usize, f64)> = None;
    for a in 0..candidates.len() {
        for b in a + 1..candidates.len() {
            let (ca, cb) = (&candidates[a], &candidates[b]);
            let gap = (ca.diversity - cb.diversity).abs();
            if (ca.reward - cb.reward).abs() > reward_tol || gap < delta || gap == 0.0 {
                continue;
            }
            if best.is_none_or(|(_, _, g)| gap > g) {
                best = Some(if ca.diversity > cb.diversity {
                    (a, b, gap)
                } else {
                    (b, a, gap)
                });
            }
        }
    }
    Ok(best.map(|(c, r, _)| (c, r)))
}

/// Pairs built from one prompt's candidates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptPairs {
    pub ctr: Option<PreferencePair>,
    pub div: Option<PreferencePair>,
    /// No candidate passed the diversity filter.
    pub no_chosen: bool,
}

pub fn build_prompt_pairs(
    prompt_id: &str,
    context: &ContextBundle,
    candidates: &[ScoredCandidate],
    config: &PairConfig,
) -> Result<PromptPairs> {
    let mut out = PromptPairs::default();
    let pair = |c: usize, r: usize, kind, weight| PreferencePair {
        prompt_id: prompt_id.to_string(),
        context: context.clone(),
        chosen: candidates[c].list.clone(),
        rejected: candidates[r].list.clone(),
        kind,
        weight,
        reward_gap: candidates[c].reward - candidates[r].reward,
    };
    match select_chosen(candidates, config.delta) {
        Ok(c) => {
            let r = select_rejected(candidates)?;
            let (rc, rr) = (candidates[c].reward, candidates[r].reward);
            if rc > rr && candidates[c].list != candidates[r].list {
                out.ctr = Some(pair(c, r, PairKind::Ctr, ctr_weight(rc, rr, config.gamma)));
            }
        }
        Err(GqsError::NoChosen) => out.no_chosen = true,
        Err(e) => return Err(e),
    }
    if let Some((c, r)) = build_div_pairs(candidates, config.div_delta, config.reward_tol)? {
        if candidates[c].list != candidates[r].list {
            out.div = Some(pair(c, r, PairKind::Div, 1.0));
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    prompt_id: String,
    context: ContextBundle,
    chosen: Vec<TokenSequence>,
    rejected: Vec<TokenSequence>,
    kind: PairKind,
    weight: f64,
    reward_gap: f64,
}

pub fn write_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let mut out = Vec::new();
    for p in pairs {
        let rec = PairRecord {
            prompt_id: p.prompt_id.clone(),
            context: p.context.clone(),
            chosen: p.chosen.queries().to_vec(),
            rejected: p.rejected.queries().to_vec(),
            kind: p.kind,
            weight: p.weight,
            reward_gap: p.reward_gap,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| GqsError::io(path, e))?;
    f.write_all(&out).map_err(|e| GqsError::io(path, e))
}

pub fn read_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    let f = std::fs::File::open(path).map_err(|e| GqsError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| GqsError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line)?;
        out.push(PreferencePair {
            prompt_id: rec.prompt_id,
            context: rec.context,
            chosen: SuggestionList::new(rec.chosen),
            rejected: SuggestionList::new(rec.rejected),
            kind: rec.kind,
            weight: rec.weight,
            reward_gap: rec.reward_gap,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::ctr::CtrModel;
    use crate::rng;
    use crate::testutil::{context, seq, tiny_ctr};

    fn cand(reward: f64, diversity: f64) -> ScoredCandidate {
        ScoredCandidate {
            list: SuggestionList::new(vec![seq(&[(reward * 1000.0) as u32 % 1000 + 10])]),
            reward,
            diversity,
        }
    }

    fn cands(rd: &[(f64, f64)]) -> Vec<ScoredCandidate> {
        rd.iter().map(|&(r, d)| cand(r, d)).collect()
    }

    #[test]
    fn reward_is_sum_of_position_scores() {
        let mut m = CtrModel::new(tiny_ctr(), &mut rng::stream(1, "m", 0));
        let ctx = context(0);
        let list = SuggestionList::new(vec![seq(&[17, 18]), seq(&[19]), seq(&[20, 21])]);
        let by_hand: f64 = (1..=3)
            .map(|p| {
                m.predict_ctr(&ctx, &list.queries()[p - 1], p, &list.prior_queries(p))
                    .unwrap()
                    .value()
            })
            .sum();
        let r = score_response(&list, &ctx, &m).unwrap().value();
        assert!((r - by_hand).abs() < 1e-12);
        let (w, b) = m.output_layer_ids();
        m.params_mut().get_mut(w).data_mut().fill(0.0);
        m.params_mut().get_mut(b).data_mut().fill(0.0);
        assert_eq!(score_response(&list, &ctx, &m).unwrap().value(), 1.5);
    }

    #[test]
    fn diversity_fixtures() {
        let ctx = context(0);
        let copies = SuggestionList::new(vec![ctx.current_query.clone(); 3]);
        assert_eq!(diversity_score(&copies, &ctx, 0.85).value(), 0.0);
        let apart = SuggestionList::new(vec![seq(&[20, 21]), seq(&[22]), seq(&[23, 19])]);
        assert_eq!(diversity_score(&apart, &ctx, 0.85).value(), 1.0);
        // The duplicated pair fails only the sibling check (0.5 each); the
        // third query passes everything.
        let mixed = SuggestionList::new(vec![seq(&[20, 21]), seq(&[20, 21]), seq(&[22])]);
        assert!((diversity_score(&mixed, &ctx, 0.85).value() - 2.0 / 3.0).abs() < 1e-15);
        // Copy of the user query that is also duplicated: two checks fail.
        let worse = SuggestionList::new(vec![ctx.current_query.clone(), ctx.current_query.clone(), seq(&[22])]);
        assert!((diversity_score(&worse, &ctx, 0.85).value() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn selection_fixtures() {
        assert_eq!(
            select_chosen(&cands(&[(0.9, 1.0), (1.2, 1.0), (0.7, 1.0)]), 0.5).unwrap(),
            1
        );
        assert_eq!(
            select_chosen(&cands(&[(0.9, 1.0), (1.2, 0.2), (0.7, 1.0)]), 0.5).unwrap(),
            0
        );
        assert!(matches!(
            select_chosen(&cands(&[(0.9, 0.1), (1.2, 0.2)]), 0.5),
            Err(GqsError::NoChosen)
        ));
        let six = cands(&[(0.6, 1.0), (0.6, 1.0), (0.6, 1.0), (0.6, 1.0), (0.6, 1.0), (0.0, 1.0)]);
        let stats = CandidateStats::of(&six.iter().map(|c| c.reward).collect::<Vec<_>>());
        assert!((stats.mean - 0.5).abs() < 1e-12);
        assert!((stats.stddev - 0.223606797749979).abs() < 1e-12);
        assert_eq!(select_rejected(&six).unwrap(), 5);
        assert_eq!(select_rejected(&cands(&[(0.4, 1.0); 4])).unwrap(), 0);
        assert!(select_rejected(&cands(&[(0.4, 1.0)])).is_err());
    }

    #[test]
    fn div_pair_fixtures() {
        assert_eq!(
            build_div_pairs(&cands(&[(1.0, 0.2), (1.01, 0.9)]), 0.5, 0.05).unwrap(),
            Some((1, 0))
        );
        assert_eq!(
            build_div_pairs(&cands(&[(0.5, 0.0), (1.5, 1.0)]), 0.5, 0.05).unwrap(),
            None
        );
    }

    fn oracle_chosen(c: &[ScoredCandidate], delta: f64) -> Option<usize> {
        let mut idx: Vec<usize> = (0..c.len()).filter(|&i| c[i].diversity >= delta).collect();
        idx.sort_by(|&a, &b| c[b].reward.partial_cmp(&c[a].reward).unwrap().then(a.cmp(&b)));
        idx.first().copied()
    }

    fn oracle_rejected(c: &[ScoredCandidate]) -> usize {
        let n = c.len() as f64;
        let mean = c.iter().map(|x| x.reward).sum::<f64>() / n;
        let sd = (c.iter().map(|x| (x.reward - mean) * (x.reward - mean)).sum::<f64>() / n).sqrt();
        let mut idx: Vec<usize> = (0..c.len()).collect();
        idx.sort_by(|&a, &b| c[a].reward.partial_cmp(&c[b].reward).unwrap().then(a.cmp(&b)));
        idx.iter()
            .copied()
            .find(|&i| c[i].reward < mean - 2.0 * sd)
            .unwrap_or(idx[0])
    }

    fn oracle_div(c: &[ScoredCandidate], delta: f64, tol: f64) -> Option<(usize, usize)> {
        let mut all = Vec::new();
        for a in 0..c.len() {
            for b in 0..c.len() {
                let gap = c[a].diversity - c[b].diversity;
                if a != b && gap > 0.0 && gap >= delta && (c[a].reward - c[b].reward).abs() <= tol {
                    all.push((gap, a.min(b), a.max(b), a, b));
                }
            }
        }
        // widest gap, then first pair in enumeration order
        all.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then((x.1, x.2).cmp(&(y.1, y.2))));
        all.first().map(|t| (t.3, t.4))
    }

    fn random_set(r: &mut impl Rng) -> Vec<ScoredCandidate> {
        let m = r.gen_range(2..12);
        let grid = r.gen_bool(0.5);
        (0..m)
            .map(|_| {
                let reward = if grid {
                    r.gen_range(0..8) as f64 / 4.0
                } else if r.gen_bool(0.1) {
                    r.gen_range(-3.0..0.0)
                } else {
                    r.gen_range(0.0..3.0)
                };
                let diversity = r.gen_range(0..7) as f64 / 6.0;
                cand(reward, diversity)
            })
            .collect()
    }

    #[test]
    fn selections_match_brute_force() {
        let mut r = rng::stream(7, "oracle", 0);
        let (mut fallbacks, mut tails) = (0, 0);
        for _ in 0..1000 {
            let c = random_set(&mut r);
            let delta = r.gen_range(0..5) as f64 / 4.0;
            let chosen = match select_chosen(&c, delta) {
                Ok(i) => Some(i),
                Err(GqsError::NoChosen) => None,
                Err(e) => panic!("{e}"),
            };
            assert_eq!(chosen, oracle_chosen(&c, delta));
            let rej = select_rejected(&c).unwrap();
            assert_eq!(rej, oracle_rejected(&c));
            let stats = CandidateStats::of(&c.iter().map(|x| x.reward).collect::<Vec<_>>());
            if c[rej].reward < stats.mean - 2.0 * stats.stddev {
                tails += 1;
            } else {
                fallbacks += 1;
            }
            let tol = r.gen_range(0..4) as f64 / 8.0;
            assert_eq!(build_div_pairs(&c, delta, tol).unwrap(), oracle_div(&c, delta, tol));
        }
        assert!(tails > 20 && fallbacks > 20, "{tails} {fallbacks}");
    }

    #[test]
    fn pairs_jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let c = cands(&[(1.2, 1.0), (0.3, 0.5), (1.19, 0.0)]);
        let pp = build_prompt_pairs("p7", &context(0), &c, &PairConfig::for_list_len(1)).unwrap();
        let pairs: Vec<PreferencePair> = pp.ctr.into_iter().chain(pp.div).collect();
        assert_eq!(pairs.len(), 2);
        write_pairs(&path, &pairs).unwrap();
        assert_eq!(read_pairs(&path).unwrap(), pairs);
    }

    proptest! {
        #[test]
        fn shifting_rewards_keeps_selections(
            rd in prop::collection::vec((0u8..16, 0u8..3), 2..10),
            shift in -4i32..4,
        ) {
            let base: Vec<ScoredCandidate> = rd.iter().map(|&(r, d)| cand(r as f64 / 8.0, d as f64 / 2.0)).collect();
            let moved: Vec<ScoredCandidate> = base
                .iter()
                .map(|c| ScoredCandidate { reward: c.reward + shift as f64, ..c.clone() })
                .collect();
            let rb: Vec<f64> = base.iter().map(|c| c.reward).collect();
            let rm: Vec<f64> = moved.iter().map(|c| c.reward).collect();
            let (sb, sm) = (CandidateStats::of(&rb), CandidateStats::of(&rm));
            prop_assert!((sm.mean - sb.mean - shift as f64).abs() < 1e-9);
            prop_assert!((sm.stddev - sb.stddev).abs() < 1e-9);
            prop_assert_eq!(select_chosen(&base, 0.5).ok(), select_chosen(&moved, 0.5).ok());
            prop_assert_eq!(select_rejected(&base).unwrap(), select_rejected(&moved).unwrap());
        }

        #[test]
        fn emitted_pairs_respect_rules(
            rd in prop::collection::vec((0u8..16, 0u8..3), 2..10),
        ) {
            let c: Vec<ScoredCandidate> = rd
                .iter()
                .enumerate()
                .map(|(i, &(r, d))| ScoredCandidate {
                    list: SuggestionList::new(vec![seq(&[10 + i as u32])]),
                    ..cand(r as f64 / 8.0, d as f64 / 2.0)
                })
                .collect();
            let cfg = PairConfig::for_list_len(3);
            let pp = build_prompt_pairs("p", &context(0), &c, &cfg).unwrap();
            let find = |l: &SuggestionList| c.iter().find(|x| &x.list == l).unwrap();
            if let Some(p) = &pp.ctr {
                let (ch, rj) = (find(&p.chosen), find(&p.rejected));
                prop_assert!(ch.reward > rj.reward);
                prop_assert!(ch.diversity >= cfg.delta);
                prop_assert!(p.weight > 0.5 && p.weight < 1.0);
            }
            if let Some(p) = &pp.div {
                let (ch, rj) = (find(&p.chosen), find(&p.rejected));
                prop_assert!((ch.reward - rj.reward).abs() <= cfg.reward_tol);
                prop_assert!(ch.diversity - rj.diversity >= cfg.div_delta);
                prop_assert_eq!(p.weight, 1.0);
            }
            let again = build_prompt_pairs("p", &context(0), &c, &cfg).unwrap();
            prop_assert_eq!(again, pp);
        }
    }
}
