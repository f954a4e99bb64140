use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::{group_by_response, ClickRecord, ResponseWeights};
use crate::context::ContextBundle;
use crate::encoder::{EncodedSequence, Encoder, EncoderConfig};
use crate::error::{GqsError, Result};
use crate::math::{sigmoid, AttnBlock, DenseMatrix, Gradients, Graph, NodeId, ParamId, ParamStore};
use crate::nn::{init_embedding, init_matrix};
use crate::suggestion::SuggestionList;
use crate::tokens::{SourceSlot, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtrConfig {
    pub encoder: EncoderConfig,
    pub d_attn: usize,
    pub d_pos: usize,
    pub n_max: usize,
    pub hidden: Vec<usize>,
    /// One (W_Q, W_K, W_V) triple per source instead of one shared triple.
    pub per_source_attention: bool,
}

impl Default for CtrConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            d_attn: 32,
            d_pos: 8,
            n_max: 8,
            hidden: vec![64, 32],
            per_source_attention: false,
        }
    }
}

/// Predicted click probability, strictly inside (0, 1).
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct CtrScore(f64);

impl CtrScore {
    const EDGE: f64 = 1e-15;

    pub fn from_logit(z: f64) -> Self {
        Self(sigmoid(z).clamp(Self::EDGE, 1.0 - Self::EDGE))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Query/key/value projections for one cross-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionParams {
    pub w_q: DenseMatrix,
    pub w_k: DenseMatrix,
    pub w_v: DenseMatrix,
}

/// Single-head cross-attention of `target` rows over `source` rows, mean-pooled
/// over the target's valid rows.
pub fn cross_attend(
    target: &EncodedSequence,
    source: &EncodedSequence,
    params: &CrossAttentionParams,
) -> Result<Vec<f64>> {
    let d = target.matrix.cols();
    if source.matrix.cols() != d || params.w_q.rows() != d || params.w_k.rows() != d || params.w_v.rows() != d {
        return Err(GqsError::Shape(format!(
            "cross_attend widths {} / {} / {}",
            d,
            source.matrix.cols(),
            params.w_q.rows()
        )));
    }
    if params.w_q.cols() != params.w_k.cols() {
        return Err(GqsError::Shape("W_Q and W_K widths differ".into()));
    }
    let store = ParamStore::new();
    let mut g = Graph::frozen(&store);
    let t = g.input(target.matrix.clone());
    let s = g.input(source.matrix.clone());
    let (wq, wk, wv) = (
        g.input(params.w_q.clone()),
        g.input(params.w_k.clone()),
        g.input(params.w_v.clone()),
    );
    let q = g.matmul(t, wq)?;
    let k = g.matmul(s, wk)?;
    let v = g.matmul(s, wv)?;
    let block = AttnBlock {
        q_start: 0,
        q_len: target.valid_len,
        k_start: 0,
        k_len: source.valid_len,
    };
    let a = g.attention(q, k, v, &[block], 1, false)?;
    let e = g.segment_mean(a, &[(0, target.valid_len)])?;
    Ok(g.value(e).row(0).to_vec())
}

#[derive(Clone, Debug)]
struct AttentionIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Encoder,
    attention: Vec<AttentionIds>,
    positions: ParamId,
    mlp: Vec<(ParamId, ParamId)>,
}

/// One suggestion to score: which context it belongs to, its display
/// position, and the queries shown above it.
#[derive(Clone, Debug)]
pub(crate) struct ScoreItem<'a> {
    pub context: usize,
    pub query: &'a TokenSequence,
    pub position: usize,
    pub prior: TokenSequence,
}

/// Multi-source click-through-rate model.
#[derive(Clone, Debug)]
pub struct CtrModel {
    config: CtrConfig,
    params: ParamStore,
    layout: Layout,
}

impl CtrModel {
    pub fn new(config: CtrConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), &mut params, "ctr.encoder", rng);
        let d = config.encoder.d_model;
        let triples = if config.per_source_attention {
            SourceSlot::ALL.len()
        } else {
            1
        };
        let attention = (0..triples)
            .map(|i| {
                // W_K starts equal to W_Q so identical tokens score high before training.
                let wq = init_matrix(rng, d, config.d_attn, 1.0);
                AttentionIds {
                    wk: params.add(format!("ctr.attn{i}.wk"), wq.clone()),
                    wq: params.add(format!("ctr.attn{i}.wq"), wq),
                    wv: params.add(format!("ctr.attn{i}.wv"), init_matrix(rng, d, config.d_attn, 1.0)),
                }
            })
            .collect();
        let positions = params.add("ctr.position_table", init_embedding(rng, config.n_max, config.d_pos));
        let mut width = SourceSlot::ALL.len() * config.d_attn + config.d_pos;
        let mut mlp = Vec::new();
        for (i, &h) in config.hidden.iter().chain(std::iter::once(&1)).enumerate() {
            let w = params.add(format!("ctr.mlp{i}.w"), init_matrix(rng, width, h, 1.0));
            let b = params.add(format!("ctr.mlp{i}.b"), DenseMatrix::zeros(1, h));
            mlp.push((w, b));
            width = h;
        }
        Self {
            config,
            params,
            layout: Layout {
                encoder,
                attention,
                positions,
                mlp,
            },
        }
    }

    /// Rebuilds a model from its config and a checkpoint store.
    pub fn from_params(config: CtrConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, &mut crate::rng::stream(0, "ctr-shape", 0));
        model.params.assign_from(&params)?;
        Ok(model)
    }

    pub fn config(&self) -> &CtrConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.layout.encoder
    }

    pub fn position_table_id(&self) -> ParamId {
        self.layout.positions
    }

    /// Ids of the final MLP layer `(weights, bias)`.
    pub fn output_layer_ids(&self) -> (ParamId, ParamId) {
        *self.layout.mlp.last().expect("at least one layer")
    }

    pub fn attention_params(&self, slot: SourceSlot) -> CrossAttentionParams {
        let ids = &self.layout.attention[if self.config.per_source_attention {
            slot.index()
        } else {
            0
        }];
        CrossAttentionParams {
            w_q: self.params.get(ids.wq).clone(),
            w_k: self.params.get(ids.wk).clone(),
            w_v: self.params.get(ids.wv).clone(),
        }
    }

    /// Logits (Rx1) for every item.
    pub(crate) fn forward_logits(
        &self,
        g: &mut Graph,
        contexts: &[&ContextBundle],
        items: &[ScoreItem],
    ) -> Result<NodeId> {
        for it in items {
            if it.position == 0 || it.position > self.config.n_max {
                return Err(GqsError::PositionOutOfRange {
                    position: it.position,
                    max: self.config.n_max,
                });
            }
        }
        let n_ctx_sources = 5;
        let mut owned: Vec<TokenSequence> = Vec::with_capacity(contexts.len() * 5 + items.len());
        for ctx in contexts {
            for (slot, seq) in ctx.sources() {
                owned.push(seq.tagged(slot.tag()));
            }
        }
        for it in items {
            owned.push(it.prior.tagged(SourceSlot::PriorQueries.tag()));
        }
        let mut seqs: Vec<&TokenSequence> = owned.iter().collect();
        seqs.extend(items.iter().map(|it| it.query));
        let (h, segs) = self.layout.encoder.encode_batch(g, &seqs)?;

        let n_sources = owned.len();
        let mut src_rows = Vec::new();
        let mut src_seg = Vec::with_capacity(n_sources);
        for &(start, len) in &segs[..n_sources] {
            src_seg.push((src_rows.len(), len));
            src_rows.extend(start..start + len);
        }
        let mut tgt_rows = Vec::new();
        let mut tgt_seg = Vec::with_capacity(items.len());
        for &(start, len) in &segs[n_sources..] {
            tgt_seg.push((tgt_rows.len(), len));
            tgt_rows.extend(start..start + len);
        }
        let targets = g.select_rows(h, &tgt_rows)?;
        let sources = g.select_rows(h, &src_rows)?;

        let mut projected: Option<(NodeId, NodeId, NodeId)> = None;
        let mut parts = Vec::with_capacity(SourceSlot::ALL.len() + 1);
        for slot in SourceSlot::ALL {
            let ids = &self.layout.attention[if self.config.per_source_attention {
                slot.index()
            } else {
                0
            }];
            let (q, k, v) = match projected {
                Some(p) if !self.config.per_source_attention => p,
                _ => {
                    let (wq, wk, wv) = (g.param(ids.wq), g.param(ids.wk), g.param(ids.wv));
                    let p = (g.matmul(targets, wq)?, g.matmul(sources, wk)?, g.matmul(sources, wv)?);
                    projected = Some(p);
                    p
                }
            };
            let blocks: Vec<AttnBlock> = items
                .iter()
                .enumerate()
                .map(|(i, it)| {
                    let src = if slot == SourceSlot::PriorQueries {
                        src_seg[contexts.len() * n_ctx_sources + i]
                    } else {
                        src_seg[it.context * n_ctx_sources + slot.index()]
                    };
                    AttnBlock {
                        q_start: tgt_seg[i].0,
                        q_len: tgt_seg[i].1,
                        k_start: src.0,
                        k_len: src.1,
                    }
                })
                .collect();
            let attended = g.attention(q, k, v, &blocks, 1, false)?;
            let pooled = crate::nn::segments_of(tgt_seg.iter().map(|s| s.1));
            parts.push(g.segment_mean(attended, &pooled)?);
        }
        let table = g.param(self.layout.positions);
        let pos_ids: Vec<usize> = items.iter().map(|it| it.position - 1).collect();
        parts.push(g.gather(table, &pos_ids)?);
        let mut x = g.concat_cols(&parts)?;
        let last = self.layout.mlp.len() - 1;
        for (i, &(w, b)) in self.layout.mlp.iter().enumerate() {
            let (w, b) = (g.param(w), g.param(b));
            x = g.affine(x, w, b)?;
            if i < last {
                x = g.gelu(x);
            }
        }
        Ok(x)
    }

    fn logits(&self, contexts: &[&ContextBundle], items: &[ScoreItem]) -> Result<Vec<f64>> {
        let mut g = Graph::frozen(&self.params);
        let node = self.forward_logits(&mut g, contexts, items)?;
        Ok(g.value(node).data().to_vec())
    }

    /// ŷ for a suggestion shown at `position` below the queries in `prior`.
    pub fn predict_ctr(
        &self,
        context: &ContextBundle,
        suggestion: &TokenSequence,
        position: usize,
        prior: &TokenSequence,
    ) -> Result<CtrScore> {
        let item = ScoreItem {
            context: 0,
            query: suggestion,
            position,
            prior: prior.clone(),
        };
        Ok(CtrScore::from_logit(self.logits(&[context], &[item])?[0]))
    }

    /// Per-position scores of one list (positions 1..=N).
    pub fn score_list(&self, context: &ContextBundle, list: &SuggestionList) -> Result<Vec<CtrScore>> {
        Ok(self.score_lists(&[(context, list)])?.remove(0))
    }

    /// Batched [`CtrModel::score_list`].
    pub fn score_lists(&self, lists: &[(&ContextBundle, &SuggestionList)]) -> Result<Vec<Vec<CtrScore>>> {
        let mut out = Vec::with_capacity(lists.len());
        for chunk in lists.chunks(64) {
            let contexts: Vec<&ContextBundle> = chunk.iter().map(|(c, _)| *c).collect();
            let mut items = Vec::new();
            for (ci, (_, list)) in chunk.iter().enumerate() {
                for (j, q) in list.queries().iter().enumerate() {
                    items.push(ScoreItem {
                        context: ci,
                        query: q,
                        position: j + 1,
                        prior: list.prior_queries(j + 1),
                    });
                }
            }
            let logits = self.logits(&contexts, &items)?;
            let mut offset = 0;
            for (_, list) in chunk {
                out.push(
                    logits[offset..offset + list.len()]
                        .iter()
                        .map(|&z| CtrScore::from_logit(z))
                        .collect(),
                );
                offset += list.len();
            }
        }
        Ok(out)
    }

    /// Scores every record (each record's list reconstructed from its response id).
    pub fn score_records(&self, records: &[ClickRecord]) -> Result<Vec<f64>> {
        let mut by_record = vec![0.0; records.len()];
        let groups = group_by_response(records);
        for chunk in groups.chunks(64) {
            let contexts: Vec<&ContextBundle> = chunk.iter().map(|g| g.context()).collect();
            let mut items = Vec::new();
            let mut slots = Vec::new();
            for (ci, group) in chunk.iter().enumerate() {
                for (r, &i) in group.records.iter().zip(&group.indices) {
                    items.push(ScoreItem {
                        context: ci,
                        query: &r.suggestion,
                        position: r.position,
                        prior: group.prior_for(r.position),
                    });
                    slots.push(i);
                }
            }
            let logits = self.logits(&contexts, &items)?;
            for (slot, z) in slots.into_iter().zip(logits) {
                by_record[slot] = CtrScore::from_logit(z).value();
            }
        }
        Ok(by_record)
    }

    /// Weighted binary cross-entropy (mean over records) and its gradient,
    /// evaluated with the parameters in `store`.
    pub fn loss_and_grad_with(
        &self,
        store: &ParamStore,
        batch: &[ClickRecord],
        weights: Option<&ResponseWeights>,
    ) -> Result<(f64, Gradients)> {
        let mut g = Graph::new(store);
        let loss = self.bce_node(&mut g, batch, weights)?;
        let value = g.value(loss).item();
        Ok((value, g.backward(loss)?))
    }

    pub fn loss_and_grad(&self, batch: &[ClickRecord], weights: Option<&ResponseWeights>) -> Result<(f64, Gradients)> {
        self.loss_and_grad_with(&self.params, batch, weights)
    }

    /// `-1/R · Σ w(Y)·[y log ŷ + (1-y) log(1-ŷ)]` over the records of `batch`.
    pub fn ctr_bce_loss(&self, batch: &[ClickRecord], weights: Option<&ResponseWeights>) -> Result<f64> {
        let mut g = Graph::frozen(&self.params);
        let loss = self.bce_node(&mut g, batch, weights)?;
        Ok(g.value(loss).item())
    }

    fn bce_node(&self, g: &mut Graph, batch: &[ClickRecord], weights: Option<&ResponseWeights>) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(GqsError::InvalidArgument("empty batch".into()));
        }
        let groups = group_by_response(batch);
        let contexts: Vec<&ContextBundle> = groups.iter().map(|gr| gr.context()).collect();
        let mut items = Vec::with_capacity(batch.len());
        let mut pos_w = Vec::with_capacity(batch.len());
        let mut neg_w = Vec::with_capacity(batch.len());
        let inv_n = 1.0 / batch.len() as f64;
        for (ci, group) in groups.iter().enumerate() {
            let w = match weights {
                None => 1.0,
                Some(map) => {
                    let w = *map
                        .get(group.response_id)
                        .ok_or_else(|| GqsError::MissingWeight(group.response_id.to_string()))?;
                    if !(w > 0.0) || !w.is_finite() {
                        return Err(GqsError::InvalidWeight {
                            response_id: group.response_id.to_string(),
                            weight: w,
                        });
                    }
                    w
                }
            };
            for r in &group.records {
                items.push(ScoreItem {
                    context: ci,
                    query: &r.suggestion,
                    position: r.position,
                    prior: group.prior_for(r.position),
                });
                let y = f64::from(r.label);
                pos_w.push(-w * y * inv_n);
                neg_w.push(-w * (1.0 - y) * inv_n);
            }
        }
        let z = self.forward_logits(g, &contexts, &items)?;
        let log_p = g.log_sigmoid(z);
        let neg_z = g.scale(z, -1.0);
        let log_q = g.log_sigmoid(neg_z);
        let a = g.weighted_sum(log_p, &pos_w)?;
        let b = g.weighted_sum(log_q, &neg_w)?;
        g.add(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::grad_check_store;
    use crate::rng;
    use crate::testutil::{context, records, seq, tiny_ctr};

    fn model() -> CtrModel {
        CtrModel::new(tiny_ctr(), &mut rng::stream(3, "t", 0))
    }

    fn zero_head(m: &mut CtrModel) {
        let (w, b) = m.output_layer_ids();
        m.params_mut().get_mut(w).data_mut().fill(0.0);
        m.params_mut().get_mut(b).data_mut().fill(0.0);
    }

    fn bce(p: f64, y: u8) -> f64 {
        if y == 1 {
            -p.ln()
        } else {
            -(1.0 - p).ln()
        }
    }

    fn matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        use rand::Rng as _;
        let mut r = rng::stream(seed, "m", 0);
        DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn params() -> CrossAttentionParams {
        CrossAttentionParams {
            w_q: matrix(4, 3, 1),
            w_k: matrix(4, 3, 2),
            w_v: matrix(4, 3, 3),
        }
    }

    #[test]
    fn cross_attend_single_key() {
        let p = params();
        let target = EncodedSequence {
            matrix: matrix(2, 4, 4),
            valid_len: 2,
        };
        let one = EncodedSequence {
            matrix: matrix(1, 4, 5),
            valid_len: 1,
        };
        let e = cross_attend(&target, &one, &p).unwrap();
        let v = one.matrix.matmul(&p.w_v).unwrap();
        for (a, b) in e.iter().zip(v.row(0)) {
            assert!((a - b).abs() < 1e-15);
        }
        let mut twice = DenseMatrix::zeros(2, 4);
        twice.row_mut(0).copy_from_slice(one.matrix.row(0));
        twice.row_mut(1).copy_from_slice(one.matrix.row(0));
        let e2 = cross_attend(
            &target,
            &EncodedSequence {
                matrix: twice,
                valid_len: 2,
            },
            &p,
        )
        .unwrap();
        for (a, b) in e.iter().zip(&e2) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_attend_matches_reference() {
        let p = params();
        let (t, s) = (matrix(2, 4, 6), matrix(3, 4, 7));
        let got = cross_attend(
            &EncodedSequence {
                matrix: t.clone(),
                valid_len: 2,
            },
            &EncodedSequence {
                matrix: s.clone(),
                valid_len: 3,
            },
            &p,
        )
        .unwrap();
        let proj = |x: &DenseMatrix, w: &DenseMatrix, r: usize, c: usize| {
            (0..4).map(|i| x.get(r, i) * w.get(i, c)).sum::<f64>()
        };
        let mut expect = [0.0; 3];
        for i in 0..2 {
            let scores: Vec<f64> = (0..3)
                .map(|j| {
                    (0..3)
                        .map(|c| proj(&t, &p.w_q, i, c) * proj(&s, &p.w_k, j, c))
                        .sum::<f64>()
                        / 3f64.sqrt()
                })
                .collect();
            let z: f64 = scores.iter().map(|x| x.exp()).sum();
            for (c, out) in expect.iter_mut().enumerate() {
                *out += (0..3)
                    .map(|j| scores[j].exp() / z * proj(&s, &p.w_v, j, c))
                    .sum::<f64>()
                    / 2.0;
            }
        }
        for (a, b) in got.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let bad = EncodedSequence {
            matrix: matrix(1, 5, 8),
            valid_len: 1,
        };
        assert!(matches!(cross_attend(&bad, &bad, &p), Err(GqsError::Shape(_))));
    }

    #[test]
    fn scores_are_probabilities_and_zero_head_gives_half() {
        let mut m = model();
        let ctx = context(0);
        let s = m.predict_ctr(&ctx, &seq(&[17]), 1, &TokenSequence::empty()).unwrap();
        assert!(s.value() > 0.0 && s.value() < 1.0);
        zero_head(&mut m);
        assert_eq!(m.predict_ctr(&ctx, &seq(&[17]), 2, &seq(&[18])).unwrap().value(), 0.5);
        let list = SuggestionList::new(vec![seq(&[17]), seq(&[18, 19]), seq(&[20])]);
        let sum: f64 = m.score_list(&ctx, &list).unwrap().iter().map(|s| s.value()).sum();
        assert_eq!(sum, 1.5);
    }

    #[test]
    fn position_range_is_enforced() {
        let m = model();
        let ctx = context(0);
        for p in [0, 5] {
            assert!(matches!(
                m.predict_ctr(&ctx, &seq(&[17]), p, &TokenSequence::empty()),
                Err(GqsError::PositionOutOfRange { .. })
            ));
        }
    }

    #[test]
    fn batched_scoring_matches_single_predictions() {
        let m = model();
        let ctx = context(1);
        let list = SuggestionList::new(vec![seq(&[17]), seq(&[18, 19]), seq(&[20])]);
        let batched = m.score_list(&ctx, &list).unwrap();
        for (j, q) in list.queries().iter().enumerate() {
            let single = m.predict_ctr(&ctx, q, j + 1, &list.prior_queries(j + 1)).unwrap();
            assert!((single.value() - batched[j].value()).abs() < 1e-12);
        }
        let recs = records();
        let scores = m.score_records(&recs).unwrap();
        for (r, s) in recs.iter().zip(scores) {
            let prior = group_by_response(&recs)
                .into_iter()
                .find(|g| g.response_id == r.response_id)
                .unwrap()
                .prior_for(r.position);
            let single = m.predict_ctr(&r.context, &r.suggestion, r.position, &prior).unwrap();
            assert!((single.value() - s).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_fixtures() {
        let mut m = model();
        zero_head(&mut m);
        let one = &records()[..1];
        assert!((m.ctr_bce_loss(one, None).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        let m = model();
        let recs = records();
        let unweighted = m.ctr_bce_loss(&recs, None).unwrap();
        let ones: ResponseWeights = [("r0".to_string(), 1.0), ("r1".to_string(), 1.0)].into();
        assert_eq!(m.ctr_bce_loss(&recs, Some(&ones)).unwrap(), unweighted);

        let scores = m.score_records(&recs).unwrap();
        let l: Vec<f64> = recs.iter().zip(&scores).map(|(r, &p)| bce(p, r.label)).collect();
        let w: ResponseWeights = [("r0".to_string(), 1.2), ("r1".to_string(), 0.8)].into();
        let expect = (1.2 * (l[0] + l[1]) + 0.8 * (l[2] + l[3])) / 4.0;
        assert!((m.ctr_bce_loss(&recs, Some(&w)).unwrap() - expect).abs() < 1e-12);
        assert!((unweighted - l.iter().sum::<f64>() / 4.0).abs() < 1e-12);
    }

    #[test]
    fn weight_errors() {
        let m = model();
        let recs = records();
        let partial: ResponseWeights = [("r0".to_string(), 1.0)].into();
        assert!(matches!(
            m.ctr_bce_loss(&recs, Some(&partial)),
            Err(GqsError::MissingWeight(id)) if id == "r1"
        ));
        let zero: ResponseWeights = [("r0".to_string(), 0.0), ("r1".to_string(), 1.0)].into();
        assert!(matches!(
            m.ctr_bce_loss(&recs, Some(&zero)),
            Err(GqsError::InvalidWeight { .. })
        ));
        assert!(m.ctr_bce_loss(&[], None).is_err());
    }

    #[test]
    fn doubling_a_weight_doubles_its_contribution() {
        let m = model();
        let recs = records();
        let n = recs.len() as f64;
        let at = |w0: f64, w1: f64| {
            let w: ResponseWeights = [("r0".to_string(), w0), ("r1".to_string(), w1)].into();
            m.ctr_bce_loss(&recs, Some(&w)).unwrap() * n
        };
        let contribution = at(1.0, 1.0) - at(1e-300, 1.0);
        assert!(((at(2.0, 1.0) - at(1.0, 1.0)) - contribution).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for per_source in [false, true] {
            let m = CtrModel::new(
                CtrConfig {
                    per_source_attention: per_source,
                    ..tiny_ctr()
                },
                &mut rng::stream(5, "t", 0),
            );
            let recs = records();
            let w: ResponseWeights = [("r0".to_string(), 1.2), ("r1".to_string(), 0.8)].into();
            let err = grad_check_store(m.params(), 1e-5, |s| m.loss_and_grad_with(s, &recs, Some(&w))).unwrap();
            assert!(err < 1e-4, "per_source={per_source}: {err}");
        }
    }

    #[test]
    fn unused_positions_get_zero_gradient() {
        let m = model();
        let (_, grads) = m.loss_and_grad(&records(), None).unwrap();
        let g = grads.get(m.position_table_id()).unwrap();
        assert!(g.row(0).iter().chain(g.row(1)).any(|v| *v != 0.0));
        assert!(g.row(2).iter().chain(g.row(3)).all(|v| *v == 0.0));
    }

    #[test]
    fn source_slots_are_not_interchangeable() {
        let m = model();
        let ctx = context(0);
        let swapped = ContextBundle {
            current_query: ctx.history.clone(),
            history: ctx.current_query.clone(),
            ..ctx.clone()
        };
        let q = seq(&[17, 11]);
        let a = m.predict_ctr(&ctx, &q, 1, &TokenSequence::empty()).unwrap();
        let b = m.predict_ctr(&swapped, &q, 1, &TokenSequence::empty()).unwrap();
        assert_ne!(a.value(), b.value());
    }

    #[test]
    fn checkpoint_params_roundtrip_through_from_params() {
        let m = model();
        let back = CtrModel::from_params(m.config().clone(), m.params().clone()).unwrap();
        let ctx = context(0);
        let q = seq(&[17]);
        assert_eq!(
            m.predict_ctr(&ctx, &q, 1, &TokenSequence::empty()).unwrap(),
            back.predict_ctr(&ctx, &q, 1, &TokenSequence::empty()).unwrap()
        );
    }
}
