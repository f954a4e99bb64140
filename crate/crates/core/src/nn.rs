//! Layers shared by the encoder and the policy.

use rand::Rng;

use crate::error::Result;
use crate::math::{AttnBlock, DenseMatrix, Graph, NodeId, ParamId, ParamStore};

/// Uniform initialisation with variance `gain² / fan_in`.
pub(crate) fn init_matrix(rng: &mut impl Rng, rows: usize, cols: usize, gain: f64) -> DenseMatrix {
    let bound = gain * (3.0 / rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("sized above")
}

pub(crate) fn init_embedding(rng: &mut impl Rng, rows: usize, cols: usize) -> DenseMatrix {
    let bound = 3f64.sqrt() * 0.5;
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("sized above")
}

pub(crate) fn ones_row(cols: usize) -> DenseMatrix {
    DenseMatrix::row_vector(vec![1.0; cols])
}

/// Fixed sinusoidal position table, `len x width`.
pub fn sinusoidal_positions(len: usize, width: usize) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(len, width);
    for pos in 0..len {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / width as f64);
            out.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

/// Pre-norm transformer block: attention and feed-forward, each residual.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ff_in: ParamId,
    pub ff_in_bias: ParamId,
    pub ff_out: ParamId,
    pub ff_out_bias: ParamId,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, ff: usize, rng: &mut impl Rng) -> Self {
        let mut add = |name: &str, m: DenseMatrix| store.add(format!("{prefix}.{name}"), m);
        Self {
            ln1_gain: add("ln1.gain", ones_row(width)),
            ln1_bias: add("ln1.bias", DenseMatrix::zeros(1, width)),
            wq: add("attn.wq", init_matrix(rng, width, width, 1.0)),
            wk: add("attn.wk", init_matrix(rng, width, width, 1.0)),
            wv: add("attn.wv", init_matrix(rng, width, width, 1.0)),
            wo: add("attn.wo", init_matrix(rng, width, width, 0.5)),
            ln2_gain: add("ln2.gain", ones_row(width)),
            ln2_bias: add("ln2.bias", DenseMatrix::zeros(1, width)),
            ff_in: add("ff.in", init_matrix(rng, width, ff, 1.0)),
            ff_in_bias: add("ff.in_bias", DenseMatrix::zeros(1, ff)),
            ff_out: add("ff.out", init_matrix(rng, ff, width, 0.5)),
            ff_out_bias: add("ff.out_bias", DenseMatrix::zeros(1, width)),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        blocks: &[AttnBlock],
        heads: usize,
        causal: bool,
    ) -> Result<NodeId> {
        let (g1, b1) = (g.param(self.ln1_gain), g.param(self.ln1_bias));
        let h = g.layer_norm(x, g1, b1)?;
        let (wq, wk, wv, wo) = (g.param(self.wq), g.param(self.wk), g.param(self.wv), g.param(self.wo));
        let q = g.matmul(h, wq)?;
        let k = g.matmul(h, wk)?;
        let v = g.matmul(h, wv)?;
        let a = g.attention(q, k, v, blocks, heads, causal)?;
        let a = g.matmul(a, wo)?;
        let x = g.add(x, a)?;
        let (g2, b2) = (g.param(self.ln2_gain), g.param(self.ln2_bias));
        let h = g.layer_norm(x, g2, b2)?;
        let (w1, c1) = (g.param(self.ff_in), g.param(self.ff_in_bias));
        let f = g.affine(h, w1, c1)?;
        let f = g.gelu(f);
        let (w2, c2) = (g.param(self.ff_out), g.param(self.ff_out_bias));
        let f = g.affine(f, w2, c2)?;
        g.add(x, f)
    }
}

/// Stacks sequences end to end; returns per-sequence `(start, len)` row ranges.
pub(crate) fn segments_of(lengths: impl IntoIterator<Item = usize>) -> Vec<(usize, usize)> {
    let mut start = 0;
    lengths
        .into_iter()
        .map(|len| {
            let seg = (start, len);
            start += len;
            seg
        })
        .collect()
}
