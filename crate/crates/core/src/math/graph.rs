//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation applied to its nodes. Parameters come
//! from a borrowed [`ParamStore`]; asking for the same parameter twice returns
//! the same node, so shared weights accumulate a single gradient. Calling
//! [`Graph::backward`] on a 1x1 node returns per-parameter gradients.
//!
//! Attention is one fused op over row blocks of stacked sequences, which keeps
//! batched evaluation cheap without a general tensor type.

use super::matrix::{
    self, dot, gelu, gelu_grad, layer_norm_rows, log_sigmoid, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, sigmoid,
    softmax_in_place, DenseMatrix,
};
use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{GqsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Rows `q_start..q_start+q_len` of the query matrix attend to rows
/// `k_start..k_start+k_len` of the key/value matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnBlock {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl AttnBlock {
    /// A sequence attending to itself.
    pub fn self_block(start: usize, len: usize) -> Self {
        Self {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
        }
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normed: DenseMatrix,
        inv_std: Vec<f64>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    SegmentReduce {
        x: NodeId,
        segments: Vec<(usize, usize)>,
        mean: bool,
    },
    ConcatCols(Vec<NodeId>),
    SelectRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        blocks: Vec<AttnBlock>,
        heads: usize,
        causal: bool,
        probs: Vec<Vec<f64>>,
    },
    PickLogSoftmax {
        logits: NodeId,
        targets: Vec<usize>,
        probs: DenseMatrix,
        masks: Option<Vec<Vec<bool>>>,
    },
    WeightedSum {
        x: NodeId,
        weights: Vec<f64>,
    },
}

/// Recorded computation over a borrowed parameter store.
pub struct Graph<'s> {
    store: &'s ParamStore,
    track: bool,
    values: Vec<DenseMatrix>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    param_nodes: Vec<Option<NodeId>>,
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> GqsError {
    GqsError::Shape(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

impl<'s> Graph<'s> {
    /// Graph that tracks gradients for every parameter it touches.
    pub fn new(store: &'s ParamStore) -> Self {
        Self::with_tracking(store, true)
    }

    /// Graph whose parameters are constants (forward evaluation only).
    pub fn frozen(store: &'s ParamStore) -> Self {
        Self::with_tracking(store, false)
    }

    fn with_tracking(store: &'s ParamStore, track: bool) -> Self {
        Self {
            store,
            track,
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, node: NodeId) -> &DenseMatrix {
        &self.values[node.0]
    }

    pub fn requires_grad(&self, node: NodeId) -> bool {
        self.needs_grad[node.0]
    }

    fn push(&mut self, value: DenseMatrix, op: Op, needs_grad: bool) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        NodeId(self.values.len() - 1)
    }

    fn ng(&self, n: NodeId) -> bool {
        self.needs_grad[n.0]
    }

    pub fn input(&mut self, value: DenseMatrix) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(node) = self.param_nodes[id.0] {
            return node;
        }
        let value = self.store.get(id).clone();
        let node = self.push(value, Op::Param(id), self.track);
        self.param_nodes[id.0] = Some(node);
        node
    }

    /// The node already bound to `id`, if any.
    pub fn param_node(&self, id: ParamId) -> Option<NodeId> {
        self.param_nodes[id.0]
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.values[a.0].matmul(&self.values[b.0])?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    fn zip_same(&mut self, a: NodeId, b: NodeId, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<DenseMatrix> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape() != vb.shape() {
            return Err(shape_err(what, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        DenseMatrix::from_vec(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    /// Adds a 1xC row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.values[a.0], &self.values[bias.0]);
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(shape_err("add_row", va.shape(), vb.shape()));
        }
        let mut value = va.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(value, Op::AddRow(a, bias), ng))
    }

    /// `x · w + b` with a 1xC bias row.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.values[a.0].map(|v| v * s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a.0].map(gelu);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a.0].map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a.0].map(log_sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::LogSigmoid(a), ng)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.values[a.0].softmax_rows()?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::SoftmaxRows(a), ng))
    }

    /// Row-wise layer normalisation followed by `* gain + bias` (both 1xC).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let vx = &self.values[x.0];
        let (vg, vb) = (&self.values[gain.0], &self.values[bias.0]);
        if vg.shape() != (1, vx.cols()) || vb.shape() != (1, vx.cols()) {
            return Err(shape_err("layer_norm", vx.shape(), vg.shape()));
        }
        let (normed, inv_std) = layer_norm_rows(vx, 1e-5);
        let mut value = normed.clone();
        for r in 0..value.rows() {
            for ((o, g), b) in value.row_mut(r).iter_mut().zip(vg.data()).zip(vb.data()) {
                *o = *o * g + b;
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            ng,
        ))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = &self.values[table.0];
        let mut value = DenseMatrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(GqsError::Shape(format!("gather row {id} of {}", t.rows())));
            }
            value.row_mut(r).copy_from_slice(t.row(id));
        }
        let ng = self.ng(table);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    fn segment_reduce(&mut self, x: NodeId, segments: &[(usize, usize)], mean: bool) -> Result<NodeId> {
        let vx = &self.values[x.0];
        let mut value = DenseMatrix::zeros(segments.len(), vx.cols());
        for (i, &(start, len)) in segments.iter().enumerate() {
            if len == 0 || start + len > vx.rows() {
                return Err(GqsError::Shape(format!("segment {start}+{len} of {} rows", vx.rows())));
            }
            let out = value.row_mut(i);
            for r in start..start + len {
                for (o, v) in out.iter_mut().zip(vx.row(r)) {
                    *o += v;
                }
            }
            if mean {
                let inv = 1.0 / len as f64;
                out.iter_mut().for_each(|v| *v *= inv);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            value,
            Op::SegmentReduce {
                x,
                segments: segments.to_vec(),
                mean,
            },
            ng,
        ))
    }

    /// Mean of each `(start, len)` row range; one output row per segment.
    pub fn segment_mean(&mut self, x: NodeId, segments: &[(usize, usize)]) -> Result<NodeId> {
        self.segment_reduce(x, segments, true)
    }

    /// Sum of each `(start, len)` row range; one output row per segment.
    pub fn segment_sum(&mut self, x: NodeId, segments: &[(usize, usize)]) -> Result<NodeId> {
        self.segment_reduce(x, segments, false)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.values[parts[0].0].rows();
        if parts.iter().any(|p| self.values[p.0].rows() != rows) {
            return Err(GqsError::Shape("concat_cols row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|p| self.values[p.0].cols()).sum();
        let mut value = DenseMatrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for p in parts {
                let src = self.values[p.0].row(r);
                value.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let vx = &self.values[x.0];
        let mut value = DenseMatrix::zeros(rows.len(), vx.cols());
        for (i, &r) in rows.iter().enumerate() {
            if r >= vx.rows() {
                return Err(GqsError::Shape(format!("select row {r} of {}", vx.rows())));
            }
            value.row_mut(i).copy_from_slice(vx.row(r));
        }
        let ng = self.ng(x);
        Ok(self.push(value, Op::SelectRows { x, rows: rows.to_vec() }, ng))
    }

    /// Multi-head scaled dot-product attention over row blocks.
    ///
    /// Output rows are the concatenation of every block's query rows, in block
    /// order. With `causal`, query row `i` of a block sees key rows
    /// `0..=i + (k_len - q_len)`. Scores are divided by √(head width).
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        blocks: &[AttnBlock],
        heads: usize,
        causal: bool,
    ) -> Result<NodeId> {
        let (vq, vk, vv) = (&self.values[q.0], &self.values[k.0], &self.values[v.0]);
        if vq.cols() != vk.cols() || vk.rows() != vv.rows() {
            return Err(shape_err("attention q/k", vq.shape(), vk.shape()));
        }
        if heads == 0 || vq.cols() % heads != 0 || vv.cols() % heads != 0 {
            return Err(GqsError::Shape(format!("{heads} heads for width {}", vq.cols())));
        }
        let dh = vq.cols() / heads;
        let dvh = vv.cols() / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let out_rows: usize = blocks.iter().map(|b| b.q_len).sum();
        let mut value = DenseMatrix::zeros(out_rows, vv.cols());
        let mut probs = Vec::with_capacity(blocks.len() * heads);
        let mut out_offset = 0;
        for b in blocks {
            if b.k_len == 0
                || b.q_start + b.q_len > vq.rows()
                || b.k_start + b.k_len > vk.rows()
                || (causal && b.k_len < b.q_len)
            {
                return Err(GqsError::Shape(format!("invalid attention block {b:?}")));
            }
            let offset = b.k_len - b.q_len.min(b.k_len);
            for h in 0..heads {
                let mut p = vec![0.0; b.q_len * b.k_len];
                for i in 0..b.q_len {
                    let qrow = &vq.row(b.q_start + i)[h * dh..(h + 1) * dh];
                    let visible = if causal { i + offset + 1 } else { b.k_len };
                    let prow = &mut p[i * b.k_len..(i + 1) * b.k_len];
                    for (j, pj) in prow.iter_mut().enumerate().take(visible) {
                        *pj = dot(qrow, &vk.row(b.k_start + j)[h * dh..(h + 1) * dh]) * scale;
                    }
                    softmax_in_place(&mut prow[..visible]);
                    let orow = &mut value.row_mut(out_offset + i)[h * dvh..(h + 1) * dvh];
                    for (j, &pj) in prow.iter().enumerate().take(visible) {
                        matrix::axpy(orow, pj, &vv.row(b.k_start + j)[h * dvh..(h + 1) * dvh]);
                    }
                }
                probs.push(p);
            }
            out_offset += b.q_len;
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                blocks: blocks.to_vec(),
                heads,
                causal,
                probs,
            },
            ng,
        ))
    }

    /// Log-softmax of each logits row (restricted to `masks[row]` when given),
    /// picking the entry `targets[row]`. Output is Rx1.
    pub fn pick_log_softmax(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        masks: Option<Vec<Vec<bool>>>,
    ) -> Result<NodeId> {
        let vl = &self.values[logits.0];
        if targets.len() != vl.rows() || masks.as_ref().is_some_and(|m| m.len() != vl.rows()) {
            return Err(GqsError::Shape("pick_log_softmax row count".into()));
        }
        let mut probs = vl.clone();
        let mut value = DenseMatrix::zeros(vl.rows(), 1);
        for r in 0..vl.rows() {
            let t = targets[r];
            let row = probs.row_mut(r);
            if t >= row.len() {
                return Err(GqsError::Shape(format!("target {t} of {}", row.len())));
            }
            let mask = masks.as_ref().map(|m| &m[r]);
            if mask.is_some_and(|m| !m[t]) {
                return Err(GqsError::InvalidArgument(format!("target token {t} is masked")));
            }
            let allowed = |j: usize| mask.is_none_or(|m| m[j]);
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| allowed(*j))
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, x) in row.iter_mut().enumerate() {
                if allowed(j) {
                    *x = (*x - max).exp();
                    sum += *x;
                } else {
                    *x = 0.0;
                }
            }
            let log_z = max + sum.ln();
            value.set(r, 0, vl.get(r, t) - log_z);
            let inv = 1.0 / sum;
            row.iter_mut().for_each(|x| *x *= inv);
        }
        let ng = self.ng(logits);
        Ok(self.push(
            value,
            Op::PickLogSoftmax {
                logits,
                targets: targets.to_vec(),
                probs,
                masks,
            },
            ng,
        ))
    }

    /// `Σ weights[i] · x[i]` over all entries of `x` in row-major order; 1x1.
    pub fn weighted_sum(&mut self, x: NodeId, weights: &[f64]) -> Result<NodeId> {
        let vx = &self.values[x.0];
        if weights.len() != vx.data().len() {
            return Err(GqsError::Shape(format!(
                "{} weights for {} entries",
                weights.len(),
                vx.data().len()
            )));
        }
        let s = dot(vx.data(), weights);
        let ng = self.ng(x);
        Ok(self.push(
            DenseMatrix::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.values[x.0].data().len();
        self.weighted_sum(x, &vec![1.0; n])
    }

    /// Propagates gradients from the 1x1 node `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = &self.values[root.0];
        if rv.shape() != (1, 1) {
            return Err(GqsError::Shape("backward root must be 1x1".into()));
        }
        rv.ensure_finite("loss")?;
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.values.len()];
        grads[root.0] = Some(DenseMatrix::scalar(1.0));
        let mut param_grads: Vec<Option<DenseMatrix>> = vec![None; self.store.len()];

        for i in (0..=root.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, g, &mut grads, &mut param_grads)?;
        }
        let out = Gradients::new(param_grads);
        if !out.is_finite() {
            return Err(GqsError::NonFinite("gradient".into()));
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        i: usize,
        g: DenseMatrix,
        grads: &mut [Option<DenseMatrix>],
        param_grads: &mut [Option<DenseMatrix>],
    ) -> Result<()> {
        let val = |n: NodeId| &self.values[n.0];
        let mut acc = |n: NodeId, delta: DenseMatrix| {
            if self.needs_grad[n.0] {
                match &mut grads[n.0] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            }
        };
        match &self.ops[i] {
            Op::Input => {}
            Op::Param(id) => param_grads[id.0] = Some(g),
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let mut ga = DenseMatrix::zeros(val(*a).rows(), val(*a).cols());
                    matmul_a_bt_acc(&g, val(*b), &mut ga);
                    acc(*a, ga);
                }
                if self.ng(*b) {
                    let mut gb = DenseMatrix::zeros(val(*b).rows(), val(*b).cols());
                    matmul_at_b_acc(val(*a), &g, &mut gb);
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*b) {
                    acc(*b, g.clone());
                }
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    acc(*b, g.map(|x| -x));
                }
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, elementwise(&g, val(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    acc(*b, elementwise(&g, val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, bias) => {
                if self.ng(*bias) {
                    let mut gb = DenseMatrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(*bias, gb);
                }
                acc(*a, g);
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::Gelu(a) => acc(*a, elementwise(&g, val(*a), |x, y| x * gelu_grad(y))),
            Op::Sigmoid(a) => {
                let y = &self.values[i];
                acc(*a, elementwise(&g, y, |x, s| x * s * (1.0 - s)));
            }
            Op::LogSigmoid(a) => {
                acc(*a, elementwise(&g, val(*a), |x, z| x * sigmoid(-z)));
            }
            Op::SoftmaxRows(a) => {
                let y = &self.values[i];
                let mut ga = g.clone();
                for r in 0..y.rows() {
                    let d = dot(g.row(r), y.row(r));
                    for (o, (gy, yy)) in ga.row_mut(r).iter_mut().zip(g.row(r).iter().zip(y.row(r))) {
                        *o = yy * (gy - d);
                    }
                }
                acc(*a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let gv = val(*gain);
                let cols = g.cols();
                if self.ng(*gain) || self.ng(*bias) {
                    let mut gg = DenseMatrix::zeros(1, cols);
                    let mut gb = DenseMatrix::zeros(1, cols);
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            gg.data_mut()[c] += g.get(r, c) * normed.get(r, c);
                            gb.data_mut()[c] += g.get(r, c);
                        }
                    }
                    acc(*gain, gg);
                    acc(*bias, gb);
                }
                if self.ng(*x) {
                    let n = cols as f64;
                    let mut gx = DenseMatrix::zeros(g.rows(), cols);
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let dxhat: Vec<f64> = g.row(r).iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dot(&dxhat, normed.row(r));
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv / n * (n * dxhat[c] - sum_d - normed.get(r, c) * sum_dx);
                        }
                    }
                    acc(*x, gx);
                }
            }
            Op::Gather { table, ids } => {
                let t = val(*table);
                let mut gt = DenseMatrix::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, x) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*table, gt);
            }
            Op::SegmentReduce { x, segments, mean } => {
                let vx = val(*x);
                let mut gx = DenseMatrix::zeros(vx.rows(), vx.cols());
                for (s, &(start, len)) in segments.iter().enumerate() {
                    let f = if *mean { 1.0 / len as f64 } else { 1.0 };
                    for r in start..start + len {
                        matrix::axpy(gx.row_mut(r), f, g.row(s));
                    }
                }
                acc(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if self.ng(*p) {
                        let mut gp = DenseMatrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        acc(*p, gp);
                    }
                    offset += w;
                }
            }
            Op::SelectRows { x, rows } => {
                let vx = val(*x);
                let mut gx = DenseMatrix::zeros(vx.rows(), vx.cols());
                for (i, &r) in rows.iter().enumerate() {
                    for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                acc(*x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                blocks,
                heads,
                causal,
                probs,
            } => {
                let (vq, vk, vv) = (val(*q), val(*k), val(*v));
                let dh = vq.cols() / heads;
                let dvh = vv.cols() / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = DenseMatrix::zeros(vq.rows(), vq.cols());
                let mut gk = DenseMatrix::zeros(vk.rows(), vk.cols());
                let mut gv = DenseMatrix::zeros(vv.rows(), vv.cols());
                let mut out_offset = 0;
                let mut pi = 0;
                for b in blocks {
                    let offset = b.k_len - b.q_len.min(b.k_len);
                    for h in 0..*heads {
                        let p = &probs[pi];
                        pi += 1;
                        let mut ds = vec![0.0; b.k_len];
                        for i in 0..b.q_len {
                            let visible = if *causal { i + offset + 1 } else { b.k_len };
                            let go = &g.row(out_offset + i)[h * dvh..(h + 1) * dvh];
                            let prow = &p[i * b.k_len..(i + 1) * b.k_len];
                            let mut weighted = 0.0;
                            for j in 0..visible {
                                let dp = dot(go, &vv.row(b.k_start + j)[h * dvh..(h + 1) * dvh]);
                                ds[j] = dp;
                                weighted += dp * prow[j];
                                matrix::axpy(&mut gv.row_mut(b.k_start + j)[h * dvh..(h + 1) * dvh], prow[j], go);
                            }
                            for j in 0..visible {
                                let d = prow[j] * (ds[j] - weighted) * scale;
                                if d == 0.0 {
                                    continue;
                                }
                                let krow = &vk.row(b.k_start + j)[h * dh..(h + 1) * dh];
                                matrix::axpy(&mut gq.row_mut(b.q_start + i)[h * dh..(h + 1) * dh], d, krow);
                                let qrow = &vq.row(b.q_start + i)[h * dh..(h + 1) * dh];
                                matrix::axpy(&mut gk.row_mut(b.k_start + j)[h * dh..(h + 1) * dh], d, qrow);
                            }
                        }
                    }
                    out_offset += b.q_len;
                }
                acc(*q, gq);
                acc(*k, gk);
                acc(*v, gv);
            }
            Op::PickLogSoftmax {
                logits,
                targets,
                probs,
                masks,
            } => {
                let mut gl = probs.clone();
                for r in 0..gl.rows() {
                    let gr = g.get(r, 0);
                    let row = gl.row_mut(r);
                    row.iter_mut().for_each(|x| *x *= -gr);
                    row[targets[r]] += gr;
                    if let Some(m) = masks {
                        for (x, allowed) in row.iter_mut().zip(&m[r]) {
                            if !allowed {
                                *x = 0.0;
                            }
                        }
                    }
                }
                acc(*logits, gl);
            }
            Op::WeightedSum { x, weights } => {
                let s = g.item();
                let vx = val(*x);
                let data = weights.iter().map(|w| w * s).collect();
                acc(*x, DenseMatrix::from_vec(vx.rows(), vx.cols(), data)?);
            }
        }
        Ok(())
    }
}

fn elementwise(a: &DenseMatrix, b: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> DenseMatrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    DenseMatrix::from_vec(a.rows(), a.cols(), data).expect("shapes checked in forward")
}

/// Evaluates `x · w` for a constant `x` without a graph; used by inference paths.
pub(crate) fn dense_matmul(x: &DenseMatrix, w: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(x.rows(), w.cols());
    matmul_acc(x, w, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::gradcheck::grad_check_store;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_store(seed: u64, shapes: &[(usize, usize)]) -> (ParamStore, Vec<ParamId>) {
        let mut r = rng::stream(seed, "graph-test", 0);
        let mut store = ParamStore::new();
        let ids = shapes
            .iter()
            .enumerate()
            .map(|(i, &(rows, cols))| {
                let data = (0..rows * cols).map(|_| r.gen_range(-1.5..1.5)).collect();
                store.add(format!("p{i}"), DenseMatrix::from_vec(rows, cols, data).unwrap())
            })
            .collect();
        (store, ids)
    }

    fn weights(seed: u64, n: usize) -> Vec<f64> {
        let mut r = rng::stream(seed, "graph-test-weights", 0);
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    fn check<F>(store: &ParamStore, seed: u64, build: F) -> f64
    where
        F: Fn(&mut Graph) -> Result<NodeId>,
    {
        grad_check_store(store, 1e-5, |s| {
            let mut g = Graph::new(s);
            let out = build(&mut g)?;
            let w = weights(seed, g.value(out).data().len());
            let loss = g.weighted_sum(out, &w)?;
            Ok((g.value(loss).item(), g.backward(loss)?))
        })
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn dense_layer_gradients(seed in any::<u64>()) {
            let (store, p) = random_store(seed, &[(4, 6), (6, 4), (1, 4), (1, 4), (1, 4)]);
            let err = check(&store, seed, |g| {
                let (x, w, b) = (g.param(p[0]), g.param(p[1]), g.param(p[2]));
                let h = g.affine(x, w, b)?;
                let h = g.gelu(h);
                let (gain, bias) = (g.param(p[3]), g.param(p[4]));
                g.layer_norm(h, gain, bias)
            });
            prop_assert!(err < 1e-5, "{err}");
        }

        #[test]
        fn elementwise_gradients(seed in any::<u64>()) {
            let (store, p) = random_store(seed, &[(3, 4), (3, 4)]);
            let err = check(&store, seed, |g| {
                let (a, b) = (g.param(p[0]), g.param(p[1]));
                let s = g.add(a, b)?;
                let d = g.sub(a, b)?;
                let m = g.mul(s, d)?;
                let sig = g.sigmoid(m);
                let ls = g.log_sigmoid(d);
                let ls = g.scale(ls, -0.7);
                let sm = g.softmax_rows(a)?;
                g.concat_cols(&[sig, ls, sm])
            });
            prop_assert!(err < 1e-5, "{err}");
        }

        #[test]
        fn indexing_gradients(seed in any::<u64>()) {
            let (store, p) = random_store(seed, &[(5, 3)]);
            let err = check(&store, seed, |g| {
                let t = g.param(p[0]);
                let e = g.gather(t, &[4, 0, 4, 2])?;
                let picked = g.select_rows(e, &[3, 1, 0])?;
                let mean = g.segment_mean(e, &[(0, 2), (2, 2)])?;
                let sum = g.segment_sum(e, &[(1, 3), (0, 1)])?;
                let ms = g.mul(mean, sum)?;
                let sel = g.select_rows(picked, &[0, 2])?;
                g.concat_cols(&[ms, sel])
            });
            prop_assert!(err < 1e-5, "{err}");
        }

        #[test]
        fn attention_gradients(seed in any::<u64>(), causal in any::<bool>()) {
            let (store, p) = random_store(seed, &[(5, 4), (7, 4), (7, 4)]);
            let blocks = [
                AttnBlock { q_start: 0, q_len: 3, k_start: 0, k_len: 4 },
                AttnBlock { q_start: 3, q_len: 2, k_start: 4, k_len: 3 },
            ];
            let err = check(&store, seed, |g| {
                let (q, k, v) = (g.param(p[0]), g.param(p[1]), g.param(p[2]));
                g.attention(q, k, v, &blocks, 2, causal)
            });
            prop_assert!(err < 1e-5, "{err}");
        }

        #[test]
        fn masked_log_softmax_gradients(seed in any::<u64>()) {
            let (store, p) = random_store(seed, &[(3, 5)]);
            let masks = vec![
                vec![true; 5],
                vec![false, true, true, false, true],
                vec![true, false, false, false, false],
            ];
            let err = check(&store, seed, |g| {
                let l = g.param(p[0]);
                g.pick_log_softmax(l, &[2, 4, 0], Some(masks.clone()))
            });
            prop_assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn shared_parameter_accumulates_one_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("x", DenseMatrix::scalar(3.0));
        let mut g = Graph::new(&store);
        let (a, b) = (g.param(id), g.param(id));
        assert_eq!(a, b);
        let sq = g.mul(a, b).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get(id).unwrap().item(), 6.0);
    }

    #[test]
    fn single_allowed_token_has_zero_log_prob() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let l = g.input(DenseMatrix::row_vector(vec![-3.0, 40.0, 2.0]));
        let out = g
            .pick_log_softmax(l, &[0], Some(vec![vec![true, false, false]]))
            .unwrap();
        assert_eq!(g.value(out).item(), 0.0);
        assert!(g
            .pick_log_softmax(l, &[1], Some(vec![vec![true, false, false]]))
            .is_err());
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(DenseMatrix::zeros(2, 3));
        let b = g.input(DenseMatrix::zeros(2, 3));
        assert!(g.matmul(a, b).is_err());
        assert!(g.gather(a, &[2]).is_err());
        assert!(g.weighted_sum(a, &[1.0]).is_err());
        let not_scalar = g.add(a, b).unwrap();
        assert!(g.backward(not_scalar).is_err());
    }
}
