//! CTR-weighted direct preference optimisation with a diversity term.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::context::ContextBundle;
use crate::error::{GqsError, Result};
use crate::math::{sigmoid, stable_log_sigmoid, Adam, DenseMatrix, Gradients, Graph, ParamStore};
use crate::policy::{Policy, PolicyCheckpoint};
use crate::prefs::{PairKind, PreferencePair};
use crate::rng;
use crate::suggestion::SuggestionList;

/// Which policy the DPO log-ratios are measured against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// The policy that entered the round.
    #[default]
    Previous,
    /// Always the supervised round-0 policy.
    RoundZero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub reference: ReferenceMode,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            gamma: 1.0,
            lambda: 0.1,
            lr: 5e-5,
            epochs: 3,
            batch_size: 16,
            reference: ReferenceMode::Previous,
            seed: 0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(GqsError::Config(format!("beta {} must be positive", self.beta)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(GqsError::Config(format!("gamma {} must be positive", self.gamma)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(GqsError::Config(format!("lambda {} must be non-negative", self.lambda)));
        }
        if !(self.lr >= 0.0) || self.batch_size == 0 {
            return Err(GqsError::Config(
                "lr must be non-negative and batch_size positive".into(),
            ));
        }
        Ok(())
    }
}

/// Pair weight `σ(γ·(r_chosen − r_rejected))`.
pub fn ctr_weight(r_chosen: f64, r_rejected: f64, gamma: f64) -> f64 {
    sigmoid(gamma * (r_chosen - r_rejected))
}

/// DPO loss from the four sequence log-probabilities of a pair.
pub fn dpo_loss_from_logprobs(
    policy_chosen: f64,
    policy_rejected: f64,
    ref_chosen: f64,
    ref_rejected: f64,
    beta: f64,
) -> Result<f64> {
    let z = beta * ((policy_chosen - ref_chosen) - (policy_rejected - ref_rejected));
    Ok(-stable_log_sigmoid(z)?)
}

/// `−log σ(β·[Δ_chosen − Δ_rejected])` with `Δ_Y = log π(Y|x) − log π_ref(Y|x)`.
pub fn dpo_loss(policy: &Policy, reference: &Policy, pair: &PreferencePair, beta: f64) -> Result<f64> {
    let items = [(&pair.context, &pair.chosen), (&pair.context, &pair.rejected)];
    let p = policy.seq_logprobs(&items)?;
    let r = reference.seq_logprobs(&items)?;
    dpo_loss_from_logprobs(p[0], p[1], r[0], r[1], beta)
}

/// [`dpo_loss`] and its gradient at the parameters in `store`, with the
/// reference log-probabilities `(chosen, rejected)` held fixed.
pub fn dpo_loss_and_grad_with(
    policy: &Policy,
    store: &ParamStore,
    pair: &PreferencePair,
    reference: (f64, f64),
    beta: f64,
) -> Result<(f64, Gradients)> {
    let single = PreferencePair {
        kind: PairKind::Div,
        ..pair.clone()
    };
    let config = DpoConfig {
        beta,
        lambda: 1.0,
        ..DpoConfig::default()
    };
    let (terms, grads) = combined_loss_and_grad_with(policy, store, &[&single], &[reference], &config)?;
    Ok((terms.combined, grads))
}

/// Reference log-probabilities `(chosen, rejected)` for each pair.
pub fn reference_logprobs(reference: &Policy, pairs: &[PreferencePair]) -> Result<Vec<(f64, f64)>> {
    let items: Vec<(&ContextBundle, &SuggestionList)> = pairs
        .iter()
        .flat_map(|p| [(&p.context, &p.chosen), (&p.context, &p.rejected)])
        .collect();
    let lps = reference.seq_logprobs(&items)?;
    Ok(lps.chunks(2).map(|c| (c[0], c[1])).collect())
}

/// β-scaled margins `β·[Δ_chosen − Δ_rejected]` of every pair.
pub fn margins(policy: &Policy, reference: &Policy, pairs: &[PreferencePair], beta: f64) -> Result<Vec<f64>> {
    let refs = reference_logprobs(reference, pairs)?;
    let now = reference_logprobs(policy, pairs)?;
    Ok(now
        .iter()
        .zip(&refs)
        .map(|(p, r)| beta * ((p.0 - r.0) - (p.1 - r.1)))
        .collect())
}

/// The two terms of the combined objective on one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub ctr_term: f64,
    pub div_term: f64,
    pub combined: f64,
    pub mean_margin: f64,
}

/// Combined loss and its gradient at the parameters in `store`:
/// the mean of `α·L` over CTR pairs plus `λ` times the mean of `L` over
/// diversity pairs. `refs` holds the frozen reference log-probabilities.
pub fn combined_loss_and_grad_with(
    policy: &Policy,
    store: &ParamStore,
    batch: &[&PreferencePair],
    refs: &[(f64, f64)],
    config: &DpoConfig,
) -> Result<(LossTerms, Gradients)> {
    if batch.is_empty() {
        return Err(GqsError::InvalidArgument("empty preference batch".into()));
    }
    if refs.len() != batch.len() {
        return Err(GqsError::Shape(format!(
            "{} reference pairs for {} pairs",
            refs.len(),
            batch.len()
        )));
    }
    let b = batch.len();
    let items: Vec<(&ContextBundle, &SuggestionList)> = batch
        .iter()
        .map(|p| (&p.context, &p.chosen))
        .chain(batch.iter().map(|p| (&p.context, &p.rejected)))
        .collect();
    let mut g = Graph::new(store);
    let lp = policy.list_logprobs_node(&mut g, &items)?;
    let chosen = g.select_rows(lp, &(0..b).collect::<Vec<_>>())?;
    let rejected = g.select_rows(lp, &(b..2 * b).collect::<Vec<_>>())?;
    let diff = g.sub(chosen, rejected)?;
    let offset = g.input(DenseMatrix::column_vector(refs.iter().map(|(c, r)| r - c).collect()));
    let diff = g.add(diff, offset)?;
    let z = g.scale(diff, config.beta);
    let ls = g.log_sigmoid(z);
    let n_ctr = batch.iter().filter(|p| p.kind == PairKind::Ctr).count();
    let n_div = b - n_ctr;
    let weights: Vec<f64> = batch
        .iter()
        .map(|p| match p.kind {
            PairKind::Ctr => -p.weight / n_ctr as f64,
            PairKind::Div => -config.lambda / n_div as f64,
        })
        .collect();
    let loss = g.weighted_sum(ls, &weights)?;
    let ls_values = g.value(ls).data();
    let mut terms = LossTerms {
        mean_margin: g.value(z).data().iter().sum::<f64>() / b as f64,
        ..LossTerms::default()
    };
    for ((p, v), w) in batch.iter().zip(ls_values).zip(&weights) {
        match p.kind {
            PairKind::Ctr => terms.ctr_term += w * v,
            PairKind::Div => terms.div_term -= v / n_div as f64,
        }
    }
    terms.combined = g.value(loss).item();
    Ok((terms, g.backward(loss)?))
}

/// [`combined_loss_and_grad_with`] value only, against a live reference policy.
pub fn combined_loss(batch: &[PreferencePair], policy: &Policy, reference: &Policy, config: &DpoConfig) -> Result<f64> {
    let refs = reference_logprobs(reference, batch)?;
    let batch: Vec<&PreferencePair> = batch.iter().collect();
    Ok(
        combined_loss_and_grad_with(policy, policy.params(), &batch, &refs, config)?
            .0
            .combined,
    )
}

/// One optimisation step of the DPO curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: usize,
    pub step: usize,
    pub ctr_term: f64,
    pub div_term: f64,
    pub combined: f64,
    pub mean_margin: f64,
}

pub const CURVE_HEADER: &str = "round,step,ctr_term,div_term,combined,mean_margin";

pub fn write_curve_csv(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| GqsError::io(path, e))?;
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!(
            "{},{},{:.9},{:.9},{:.9},{:.9}\n",
            p.round, p.step, p.ctr_term, p.div_term, p.combined, p.mean_margin
        ));
    }
    f.write_all(out.as_bytes()).map_err(|e| GqsError::io(path, e))
}

/// Runs one DPO round: `policy_in` is trained on `pairs` against `reference`
/// (the entering policy when `None`) and returned as round `policy_in.round + 1`.
pub fn train_dpo(
    pairs: &[PreferencePair],
    policy_in: &PolicyCheckpoint,
    reference: Option<&Policy>,
    config: &DpoConfig,
) -> Result<(PolicyCheckpoint, Vec<CurvePoint>)> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(GqsError::InvalidArgument("no preference pairs".into()));
    }
    let reference = reference.unwrap_or(&policy_in.policy);
    let refs = reference_logprobs(reference, pairs)?;
    let mut policy = policy_in.policy.clone();
    let round = policy_in.round + 1;
    let mut adam = Adam::new(policy.params(), config.lr);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut shuffle = rng::stream(config.seed, "dpo-shuffle", round as u64);
    let mut curve = Vec::new();
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PreferencePair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let batch_refs: Vec<(f64, f64)> = chunk.iter().map(|&i| refs[i]).collect();
            let (terms, grads) = combined_loss_and_grad_with(&policy, policy.params(), &batch, &batch_refs, config)?;
            if !terms.combined.is_finite() {
                return Err(GqsError::Diverged(format!(
                    "DPO loss {} at round {round}, step {}",
                    terms.combined,
                    curve.len()
                )));
            }
            adam.step(policy.params_mut(), &grads)?;
            curve.push(CurvePoint {
                round,
                step: curve.len(),
                ctr_term: terms.ctr_term,
                div_term: terms.div_term,
                combined: terms.combined,
                mean_margin: terms.mean_margin,
            });
        }
    }
    Ok((
        PolicyCheckpoint {
            policy,
            round,
            policy_id: PolicyCheckpoint::policy_id_for(round),
            config_hash: policy_in.config_hash.clone(),
        },
        curve,
    ))
}
