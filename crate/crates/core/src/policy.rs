//! Autoregressive suggestion policy.
//!
//! A small decoder-only transformer reads the flattened context prompt and
//! writes a serialized suggestion list. Training and scoring run through the
//! differentiable graph; sampling uses a dense key/value cache.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::context::ContextBundle;
use crate::error::{GqsError, Result};
use crate::math::{
    cosine_lr, dense_matmul, dot, gelu, layer_norm_rows, softmax_in_place, Adam, AttnBlock, DenseMatrix, Gradients,
    Graph, NodeId, ParamId, ParamStore,
};
use crate::nn::{init_embedding, init_matrix, ones_row, segments_of, sinusoidal_positions, TransformerBlock};
use crate::rng;
use crate::suggestion::{GrammarState, ResponseGrammar, SuggestionList};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    /// Longest prompt plus response.
    pub max_len: usize,
    pub max_query_len: usize,
    /// Cap on generated tokens; `None` means whatever the grammar needs.
    pub max_response_tokens: Option<usize>,
    pub decode_retries: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            heads: 2,
            d_ff: 64,
            layers: 2,
            max_len: 96,
            max_query_len: 4,
            max_response_tokens: None,
            decode_retries: 4,
        }
    }
}

#[derive(Clone, Debug)]
struct Layout {
    embedding: ParamId,
    blocks: Vec<TransformerBlock>,
    final_gain: ParamId,
    final_bias: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// One sequence to score: `response` continues `prompt`; `masks[i]` restricts
/// the distribution of `response[i]`.
#[derive(Clone, Debug)]
pub(crate) struct ScoredSeq<'a> {
    pub prompt: &'a [u32],
    pub response: &'a [u32],
    pub masks: Option<Vec<Vec<bool>>>,
}

/// A sampled list with the log-probability accumulated while sampling it.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub list: SuggestionList,
    pub logprob: f64,
}

#[derive(Clone, Debug)]
pub struct Policy {
    config: PolicyConfig,
    params: ParamStore,
    layout: Layout,
    positions: DenseMatrix,
}

#[derive(Clone)]
struct KvCache {
    layers: Vec<(Vec<f64>, Vec<f64>)>,
    len: usize,
}

impl Policy {
    pub fn new(config: PolicyConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let (d, v) = (config.d_model, config.vocab_size);
        let embedding = params.add("policy.embedding", init_embedding(rng, v, d));
        let blocks = (0..config.layers)
            .map(|l| TransformerBlock::new(&mut params, &format!("policy.block{l}"), d, config.d_ff, rng))
            .collect();
        let final_gain = params.add("policy.final.gain", ones_row(d));
        let final_bias = params.add("policy.final.bias", DenseMatrix::zeros(1, d));
        let out_w = params.add("policy.out.w", init_matrix(rng, d, v, 1.0));
        let out_b = params.add("policy.out.b", DenseMatrix::zeros(1, v));
        let positions = sinusoidal_positions(config.max_len, d);
        Self {
            config,
            params,
            layout: Layout {
                embedding,
                blocks,
                final_gain,
                final_bias,
                out_w,
                out_b,
            },
            positions,
        }
    }

    pub fn from_params(config: PolicyConfig, params: ParamStore) -> Result<Self> {
        let mut p = Self::new(config, &mut rng::stream(0, "policy-shape", 0));
        p.params.assign_from(&params)?;
        Ok(p)
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Id of the output projection, for fixtures that pin the logits.
    pub fn output_ids(&self) -> (ParamId, ParamId) {
        (self.layout.out_w, self.layout.out_b)
    }

    pub fn grammar(&self, n: usize) -> ResponseGrammar {
        ResponseGrammar {
            n,
            max_query_len: self.config.max_query_len,
            vocab: self.config.vocab_size,
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(GqsError::TokenOutOfRange {
                    token: t,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Per-sequence log-probabilities (Bx1) of each response given its prompt.
    pub(crate) fn logprob_node(&self, g: &mut Graph, seqs: &[ScoredSeq]) -> Result<NodeId> {
        let mut ids = Vec::new();
        let mut pos_rows = Vec::new();
        let mut lengths = Vec::with_capacity(seqs.len());
        let mut predict_rows = Vec::new();
        let mut targets = Vec::new();
        let mut masks: Option<Vec<Vec<bool>>> = seqs.iter().any(|s| s.masks.is_some()).then(Vec::new);
        let mut counts = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.prompt.is_empty() || s.response.is_empty() {
                return Err(GqsError::EmptySequence);
            }
            self.check_tokens(s.prompt)?;
            self.check_tokens(s.response)?;
            let len = s.prompt.len() + s.response.len() - 1;
            if len > self.config.max_len {
                return Err(GqsError::SequenceTooLong {
                    len,
                    max: self.config.max_len,
                });
            }
            let start = ids.len();
            ids.extend(s.prompt.iter().map(|&t| t as usize));
            ids.extend(s.response[..s.response.len() - 1].iter().map(|&t| t as usize));
            pos_rows.extend(0..len);
            lengths.push(len);
            for i in 0..s.response.len() {
                predict_rows.push(start + s.prompt.len() - 1 + i);
                targets.push(s.response[i] as usize);
            }
            if let Some(all) = masks.as_mut() {
                match &s.masks {
                    Some(m) if m.len() == s.response.len() => all.extend(m.iter().cloned()),
                    Some(_) => return Err(GqsError::Shape("one mask per response token".into())),
                    None => all.extend(std::iter::repeat_n(
                        vec![true; self.config.vocab_size],
                        s.response.len(),
                    )),
                }
            }
            counts.push(s.response.len());
        }
        let mut pos = DenseMatrix::zeros(ids.len(), self.config.d_model);
        for (r, &p) in pos_rows.iter().enumerate() {
            pos.row_mut(r).copy_from_slice(self.positions.row(p));
        }
        let blocks: Vec<AttnBlock> = segments_of(lengths)
            .into_iter()
            .map(|(s, l)| AttnBlock::self_block(s, l))
            .collect();
        let table = g.param(self.layout.embedding);
        let emb = g.gather(table, &ids)?;
        let pos = g.input(pos);
        let mut x = g.add(emb, pos)?;
        for block in &self.layout.blocks {
            x = block.forward(g, x, &blocks, self.config.heads, true)?;
        }
        let x = g.select_rows(x, &predict_rows)?;
        let (fg, fb) = (g.param(self.layout.final_gain), g.param(self.layout.final_bias));
        let x = g.layer_norm(x, fg, fb)?;
        let (w, b) = (g.param(self.layout.out_w), g.param(self.layout.out_b));
        let logits = g.affine(x, w, b)?;
        let picked = g.pick_log_softmax(logits, &targets, masks)?;
        g.segment_sum(picked, &segments_of(counts))
    }

    fn list_seq<'a>(&self, context_prompt: &'a [u32], serialized: &'a [u32], n: usize) -> Result<ScoredSeq<'a>> {
        Ok(ScoredSeq {
            prompt: context_prompt,
            response: serialized,
            masks: Some(self.grammar(n).masks_for(serialized)?),
        })
    }

    /// Graph node (Bx1) of `log π(Y | x)` for each `(context, list)`, with the
    /// grammar applied so probability mass stays on well-formed lists.
    pub(crate) fn list_logprobs_node(
        &self,
        g: &mut Graph,
        items: &[(&ContextBundle, &SuggestionList)],
    ) -> Result<NodeId> {
        let prompts: Vec<Vec<u32>> = items.iter().map(|(c, _)| c.prompt_tokens()).collect();
        let bodies: Vec<Vec<u32>> = items.iter().map(|(_, l)| SuggestionList::serialize(l)).collect();
        let seqs = items
            .iter()
            .enumerate()
            .map(|(i, (_, l))| self.list_seq(&prompts[i], &bodies[i], l.len()))
            .collect::<Result<Vec<_>>>()?;
        self.logprob_node(g, &seqs)
    }

    /// Mean negative log-likelihood of the lists and its gradient, evaluated
    /// at the parameters in `store`.
    pub fn nll_and_grad_with(
        &self,
        store: &ParamStore,
        items: &[(&ContextBundle, &SuggestionList)],
    ) -> Result<(f64, Gradients)> {
        let mut g = Graph::new(store);
        let lp = self.list_logprobs_node(&mut g, items)?;
        let loss = g.sum(lp)?;
        let loss = g.scale(loss, -1.0 / items.len().max(1) as f64);
        let value = g.value(loss).item();
        Ok((value, g.backward(loss)?))
    }

    /// Exact `log π(Y | x)` under teacher forcing, separators and END included.
    pub fn seq_logprob(&self, list: &SuggestionList, context: &ContextBundle) -> Result<f64> {
        Ok(self.seq_logprobs(&[(context, list)])?[0])
    }

    /// Batched [`Policy::seq_logprob`].
    pub fn seq_logprobs(&self, items: &[(&ContextBundle, &SuggestionList)]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(32) {
            let mut g = Graph::frozen(&self.params);
            let node = self.list_logprobs_node(&mut g, chunk)?;
            out.extend_from_slice(g.value(node).data());
        }
        Ok(out)
    }

    /// Unconstrained log-probability of `tokens` following `prompt`.
    pub fn raw_logprob(&self, prompt: &[u32], tokens: &[u32]) -> Result<f64> {
        let mut g = Graph::frozen(&self.params);
        let node = self.logprob_node(
            &mut g,
            &[ScoredSeq {
                prompt,
                response: tokens,
                masks: None,
            }],
        )?;
        Ok(g.value(node).item())
    }

    fn layer_params(&self, block: &TransformerBlock) -> [&DenseMatrix; 12] {
        let p = |id| self.params.get(id);
        [
            p(block.ln1_gain),
            p(block.ln1_bias),
            p(block.wq),
            p(block.wk),
            p(block.wv),
            p(block.wo),
            p(block.ln2_gain),
            p(block.ln2_bias),
            p(block.ff_in),
            p(block.ff_in_bias),
            p(block.ff_out),
            p(block.ff_out_bias),
        ]
    }

    fn norm_affine(x: &DenseMatrix, gain: &DenseMatrix, bias: &DenseMatrix) -> DenseMatrix {
        let (mut h, _) = layer_norm_rows(x, 1e-5);
        for ((o, g), b) in h.data_mut().iter_mut().zip(gain.data()).zip(bias.data()) {
            *o = *o * g + b;
        }
        h
    }

    fn add_bias(x: &mut DenseMatrix, bias: &DenseMatrix) {
        for (o, b) in x.data_mut().iter_mut().zip(bias.data()) {
            *o += b;
        }
    }

    /// Feeds one token at the next position; returns the next-token logits.
    fn step(&self, cache: &mut KvCache, token: u32) -> Result<Vec<f64>> {
        self.check_tokens(&[token])?;
        if cache.len >= self.config.max_len {
            return Err(GqsError::SequenceTooLong {
                len: cache.len + 1,
                max: self.config.max_len,
            });
        }
        let d = self.config.d_model;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = DenseMatrix::row_vector(self.params.get(self.layout.embedding).row(token as usize).to_vec());
        for (o, p) in x.data_mut().iter_mut().zip(self.positions.row(cache.len)) {
            *o += p;
        }
        for (block, (kc, vc)) in self.layout.blocks.iter().zip(cache.layers.iter_mut()) {
            let [g1, b1, wq, wk, wv, wo, g2, b2, w1, c1, w2, c2] = self.layer_params(block);
            let h = Self::norm_affine(&x, g1, b1);
            let q = dense_matmul(&h, wq);
            kc.extend_from_slice(dense_matmul(&h, wk).data());
            vc.extend_from_slice(dense_matmul(&h, wv).data());
            let rows = cache.len + 1;
            let mut a = DenseMatrix::zeros(1, d);
            let mut p = vec![0.0; rows];
            for head in 0..heads {
                let qh = &q.data()[head * dh..(head + 1) * dh];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = dot(qh, &kc[j * d + head * dh..j * d + (head + 1) * dh]) * scale;
                }
                softmax_in_place(&mut p);
                let out = &mut a.data_mut()[head * dh..(head + 1) * dh];
                for (j, &pj) in p.iter().enumerate() {
                    for (o, v) in out.iter_mut().zip(&vc[j * d + head * dh..j * d + (head + 1) * dh]) {
                        *o += pj * v;
                    }
                }
            }
            x.add_assign(&dense_matmul(&a, wo));
            let h = Self::norm_affine(&x, g2, b2);
            let mut f = dense_matmul(&h, w1);
            Self::add_bias(&mut f, c1);
            let f = f.map(gelu);
            let mut f = dense_matmul(&f, w2);
            Self::add_bias(&mut f, c2);
            x.add_assign(&f);
        }
        cache.len += 1;
        let h = Self::norm_affine(
            &x,
            self.params.get(self.layout.final_gain),
            self.params.get(self.layout.final_bias),
        );
        let mut logits = dense_matmul(&h, self.params.get(self.layout.out_w));
        Self::add_bias(&mut logits, self.params.get(self.layout.out_b));
        Ok(logits.into_vec())
    }

    /// Runs the prompt; returns the cache and the logits for the first response token.
    fn prefill(&self, prompt: &[u32]) -> Result<(KvCache, Vec<f64>)> {
        if prompt.is_empty() {
            return Err(GqsError::EmptySequence);
        }
        let mut cache = KvCache {
            layers: vec![(Vec::new(), Vec::new()); self.config.layers],
            len: 0,
        };
        let mut logits = Vec::new();
        for &t in prompt {
            logits = self.step(&mut cache, t)?;
        }
        Ok((cache, logits))
    }

    /// Unconstrained next-token log-probabilities after `prompt`.
    pub fn next_token_logprobs(&self, prompt: &[u32]) -> Result<Vec<f64>> {
        let (_, logits) = self.prefill(prompt)?;
        Ok(masked_log_softmax(&logits, None))
    }

    /// Samples `len` tokens after `prompt` with no grammar.
    pub fn sample_raw(&self, prompt: &[u32], len: usize, temperature: f64, rng: &mut impl Rng) -> Result<Vec<u32>> {
        let (mut cache, mut logits) = self.prefill(prompt)?;
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            let t = choose(&logits, None, temperature, rng)?;
            out.push(t);
            if i + 1 < len {
                logits = self.step(&mut cache, t)?;
            }
        }
        Ok(out)
    }

    /// Samples `m` lists of `n` queries. Temperature 0 decodes greedily.
    pub fn generate(
        &self,
        context: &ContextBundle,
        m: usize,
        n: usize,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<Generated>> {
        if m == 0 || n == 0 {
            return Err(GqsError::InvalidArgument("generate needs m ≥ 1 and n ≥ 1".into()));
        }
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(GqsError::InvalidArgument(format!("temperature {temperature}")));
        }
        let prompt = context.prompt_tokens();
        let grammar = self.grammar(n);
        let room = self.config.max_len.saturating_sub(prompt.len()) + 1;
        let cap = self
            .config
            .max_response_tokens
            .unwrap_or(grammar.max_tokens())
            .min(room);
        let (cache, first) = self.prefill(&prompt)?;
        let mut out = Vec::with_capacity(m);
        for _ in 0..m {
            let mut attempt = 0;
            loop {
                match self.decode_one(&cache, &first, grammar, cap, temperature, rng)? {
                    Some(g) => {
                        out.push(g);
                        break;
                    }
                    None if attempt < self.config.decode_retries => attempt += 1,
                    None => {
                        return Err(GqsError::Decode {
                            attempts: attempt + 1,
                            reason: format!("no complete list of {n} queries within {cap} tokens"),
                        })
                    }
                }
            }
        }
        Ok(out)
    }

    fn decode_one(
        &self,
        cache: &KvCache,
        first: &[f64],
        grammar: ResponseGrammar,
        cap: usize,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<Option<Generated>> {
        let mut cache = cache.clone();
        let mut logits = first.to_vec();
        let mut st = GrammarState::default();
        let mut tokens = Vec::new();
        let mut logprob = 0.0;
        while tokens.len() < cap {
            let mask = grammar.allowed(st);
            let t = choose(&logits, Some(&mask), temperature, rng)?;
            logprob += masked_log_softmax(&logits, Some(&mask))[t as usize];
            st = grammar.advance(st, t)?;
            tokens.push(t);
            if st.finished {
                return Ok(Some(Generated {
                    list: SuggestionList::parse(&tokens, grammar.n)?,
                    logprob,
                }));
            }
            logits = self.step(&mut cache, t)?;
        }
        Ok(None)
    }
}

fn masked_log_softmax(logits: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let allowed = |j: usize| mask.is_none_or(|m| m[j]);
    let max = logits
        .iter()
        .enumerate()
        .filter(|(j, _)| allowed(*j))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits
        .iter()
        .enumerate()
        .filter(|(j, _)| allowed(*j))
        .map(|(_, v)| (v - max).exp())
        .sum();
    let log_z = max + sum.ln();
    logits
        .iter()
        .enumerate()
        .map(|(j, v)| if allowed(j) { v - log_z } else { f64::NEG_INFINITY })
        .collect()
}

fn choose(logits: &[f64], mask: Option<&[bool]>, temperature: f64, rng: &mut impl Rng) -> Result<u32> {
    let allowed = |j: usize| mask.is_none_or(|m| m[j]);
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(GqsError::NonFinite("policy logits".into()));
    }
    if temperature == 0.0 {
        let mut best: Option<(usize, f64)> = None;
        for (j, &v) in logits.iter().enumerate() {
            if allowed(j) && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        return best
            .map(|(j, _)| j as u32)
            .ok_or_else(|| GqsError::InvalidArgument("no token allowed".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    let lp = masked_log_softmax(&scaled, mask);
    let mut u: f64 = rng.gen();
    let mut last = None;
    for (j, l) in lp.iter().enumerate() {
        if !allowed(j) {
            continue;
        }
        let p = l.exp();
        last = Some(j);
        if u < p {
            return Ok(j as u32);
        }
        u -= p;
    }
    last.map(|j| j as u32)
        .ok_or_else(|| GqsError::InvalidArgument("no token allowed".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// A policy tagged with its optimisation round.
#[derive(Clone, Debug)]
pub struct PolicyCheckpoint {
    pub policy: Policy,
    pub round: usize,
    pub policy_id: String,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct PolicySidecar {
    policy_id: String,
    round: usize,
    config_hash: String,
    config: PolicyConfig,
}

impl PolicyCheckpoint {
    pub fn policy_id_for(round: usize) -> String {
        format!("policy-r{round}")
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.policy.params().save(path)?;
        let side = PolicySidecar {
            policy_id: self.policy_id.clone(),
            round: self.round,
            config_hash: self.config_hash.clone(),
            config: self.policy.config().clone(),
        };
        let side_path = Self::sidecar_path(path);
        std::fs::write(&side_path, serde_json::to_string_pretty(&side)?).map_err(|e| GqsError::io(&side_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side_path = Self::sidecar_path(path);
        let text = std::fs::read_to_string(&side_path).map_err(|e| GqsError::io(&side_path, e))?;
        let side: PolicySidecar = serde_json::from_str(&text)?;
        Ok(Self {
            policy: Policy::from_params(side.config, ParamStore::load(path)?)?,
            round: side.round,
            policy_id: side.policy_id,
            config_hash: side.config_hash,
        })
    }
}

/// Mean negative log-likelihood of `data` under `policy`.
pub fn mean_nll(policy: &Policy, data: &[(ContextBundle, SuggestionList)]) -> Result<f64> {
    let items: Vec<(&ContextBundle, &SuggestionList)> = data.iter().map(|(c, l)| (c, l)).collect();
    let lps = policy.seq_logprobs(&items)?;
    Ok(-lps.iter().sum::<f64>() / lps.len().max(1) as f64)
}

/// Supervised fine-tuning on reference lists; returns the round-0 checkpoint.
pub fn sft_train(
    data: &[(ContextBundle, SuggestionList)],
    policy_config: &PolicyConfig,
    config: &SftConfig,
    config_hash: &str,
) -> Result<PolicyCheckpoint> {
    if data.is_empty() {
        return Err(GqsError::InvalidArgument("empty SFT dataset".into()));
    }
    let mut policy = Policy::new(policy_config.clone(), &mut rng::stream(config.seed, "policy-init", 0));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle = rng::stream(config.seed, "sft-shuffle", 0);
    let mut adam = Adam::new(policy.params(), config.lr);
    let batch = config.batch_size.max(1);
    let total = data.len().div_ceil(batch) * config.epochs;
    let mut step = 0;
    for _ in 0..config.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(batch) {
            let items: Vec<(&ContextBundle, &SuggestionList)> =
                chunk.iter().map(|&i| (&data[i].0, &data[i].1)).collect();
            let (loss, grads) = policy.nll_and_grad_with(policy.params(), &items)?;
            if !loss.is_finite() {
                return Err(GqsError::Diverged("SFT loss is not finite".into()));
            }
            adam.lr = cosine_lr(config.lr, step, total, total / 20, 0.1);
            adam.step(policy.params_mut(), &grads)?;
            step += 1;
        }
    }
    Ok(PolicyCheckpoint {
        policy,
        round: 0,
        policy_id: PolicyCheckpoint::policy_id_for(0),
        config_hash: config_hash.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::grad_check_store;
    use crate::testutil::{context, seq};

    fn toy() -> Policy {
        let config = PolicyConfig {
            vocab_size: 3,
            d_model: 4,
            heads: 2,
            d_ff: 6,
            layers: 1,
            max_len: 8,
            max_query_len: 2,
            max_response_tokens: None,
            decode_retries: 2,
        };
        Policy::new(config, &mut rng::stream(5, "toy", 0))
    }

    fn small() -> Policy {
        let config = PolicyConfig {
            vocab_size: 24,
            d_model: 8,
            heads: 2,
            d_ff: 12,
            layers: 2,
            max_len: 24,
            max_query_len: 2,
            max_response_tokens: None,
            decode_retries: 2,
        };
        Policy::new(config, &mut rng::stream(6, "small", 0))
    }

    fn list(qs: &[&[u32]]) -> SuggestionList {
        SuggestionList::new(qs.iter().map(|q| seq(q)).collect())
    }

    #[test]
    fn toy_sequences_sum_to_one() {
        let p = toy();
        let mut total = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                total += p.raw_logprob(&[1, 2], &[a, b]).unwrap().exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-10, "{total}");
    }

    #[test]
    fn cached_and_batched_paths_agree() {
        let p = toy();
        let next = p.next_token_logprobs(&[0, 2, 1]).unwrap();
        for t in 0..3u32 {
            let lp = p.raw_logprob(&[0, 2, 1], &[t]).unwrap();
            assert!((lp - next[t as usize]).abs() < 1e-10);
        }
    }

    #[test]
    fn sampling_matches_softmax() {
        let p = toy();
        let probs: Vec<f64> = p.next_token_logprobs(&[2]).unwrap().iter().map(|l| l.exp()).collect();
        let mut r = rng::stream(1, "draws", 0);
        let mut counts = [0usize; 3];
        let draws = 100_000;
        for _ in 0..draws {
            counts[p.sample_raw(&[2], 1, 1.0, &mut r).unwrap()[0] as usize] += 1;
        }
        for t in 0..3 {
            let freq = counts[t] as f64 / draws as f64;
            assert!((freq - probs[t]).abs() < 0.01, "{t}: {freq} vs {}", probs[t]);
        }
    }

    #[test]
    fn sampled_logprob_matches_teacher_forcing() {
        let p = small();
        let ctx = context(0);
        let mut r = rng::stream(2, "gen", 0);
        for g in p.generate(&ctx, 5, 3, 1.0, &mut r).unwrap() {
            assert_eq!(g.list.len(), 3);
            let lp = p.seq_logprob(&g.list, &ctx).unwrap();
            assert!((lp - g.logprob).abs() < 1e-9, "{lp} vs {}", g.logprob);
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let p = small();
        let ctx = context(1);
        let a = p.generate(&ctx, 2, 2, 0.0, &mut rng::stream(1, "a", 0)).unwrap();
        let b = p.generate(&ctx, 1, 2, 0.0, &mut rng::stream(9, "b", 0)).unwrap();
        assert_eq!(a[0], a[1]);
        assert_eq!(a[0], b[0]);
    }

    #[test]
    fn grammar_masks_keep_mass_on_lists() {
        // Every well-formed list of one query of at most two tokens from a
        // three-token alphabet.
        let mut config = small().config().clone();
        config.vocab_size = 13;
        let p = Policy::new(config, &mut rng::stream(4, "m", 0));
        let ctx = crate::context::ContextBundle {
            current_query: seq(&[10]),
            assistant_response: seq(&[11]),
            history: seq(&[12]),
            user_profile: seq(&[10]),
            coo_queries: crate::tokens::TokenSequence::empty(),
            latent: None,
        };
        let mut total = 0.0;
        for a in 10..13 {
            total += p.seq_logprob(&list(&[&[a]]), &ctx).unwrap().exp();
            for b in 10..13 {
                total += p.seq_logprob(&list(&[&[a, b]]), &ctx).unwrap().exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-10, "{total}");
    }

    #[test]
    fn short_cap_fails_to_decode() {
        let mut p = small();
        p.config.max_response_tokens = Some(2);
        let err = p.generate(&context(0), 1, 3, 1.0, &mut rng::stream(0, "x", 0));
        assert!(matches!(err, Err(GqsError::Decode { .. })));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = small();
        let (c0, c1) = (context(0), context(2));
        let (l0, l1) = (list(&[&[17, 18], &[19]]), list(&[&[20], &[21, 22]]));
        let items = [(&c0, &l0), (&c1, &l1)];
        let err = grad_check_store(p.params(), 1e-5, |s| p.nll_and_grad_with(s, &items)).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn sft_memorizes_small_set() {
        let data = vec![
            (context(0), list(&[&[17, 18], &[19]])),
            (context(4), list(&[&[20], &[21, 22]])),
        ];
        let config = SftConfig {
            epochs: 150,
            batch_size: 2,
            lr: 1e-2,
            seed: 3,
        };
        let ckpt = sft_train(&data, small().config(), &config, "h").unwrap();
        for (ctx, l) in &data {
            let g = ckpt
                .policy
                .generate(ctx, 1, 2, 0.0, &mut rng::stream(0, "g", 0))
                .unwrap();
            assert_eq!(&g[0].list, l);
        }
        assert!(mean_nll(&ckpt.policy, &data).unwrap() < 0.1);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        let ckpt = PolicyCheckpoint {
            policy: small(),
            round: 2,
            policy_id: PolicyCheckpoint::policy_id_for(2),
            config_hash: "abc".into(),
        };
        ckpt.save(&path).unwrap();
        let back = PolicyCheckpoint::load(&path).unwrap();
        assert_eq!(back.round, 2);
        assert_eq!(back.policy_id, "policy-r2");
        assert_eq!(back.policy.params(), ckpt.policy.params());
    }
}
