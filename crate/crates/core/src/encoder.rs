//! Shared contextual sequence encoder.
//!
//! Token embeddings plus sinusoidal positions feed a stack of bidirectional
//! self-attention blocks. Every sequence encoded through one [`Encoder`]
//! reads the same parameter tensors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::math::{AttnBlock, DenseMatrix, Graph, NodeId, ParamId, ParamStore};
use crate::nn::{init_embedding, ones_row, segments_of, sinusoidal_positions, TransformerBlock};
use crate::tokens::TokenSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            heads: 2,
            d_ff: 64,
            layers: 2,
            max_len: 32,
        }
    }
}

/// Contextual representation of one sequence: one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    pub matrix: DenseMatrix,
    pub valid_len: usize,
}

impl EncodedSequence {
    /// Mean over the first `valid_len` rows; rows past it are padding.
    pub fn mean_pool(&self) -> Vec<f64> {
        self.matrix.mean_rows(self.valid_len.max(1))
    }
}

/// Free-function form of [`EncodedSequence::mean_pool`].
pub fn mean_pool(enc: &EncodedSequence) -> Vec<f64> {
    enc.mean_pool()
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    token_embedding: ParamId,
    final_gain: ParamId,
    final_bias: ParamId,
    blocks: Vec<TransformerBlock>,
    positions: DenseMatrix,
}

impl Encoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Self {
        let token_embedding = store.add(
            format!("{prefix}.token_embedding"),
            init_embedding(rng, config.vocab_size, config.d_model),
        );
        let blocks = (0..config.layers)
            .map(|l| TransformerBlock::new(store, &format!("{prefix}.block{l}"), config.d_model, config.d_ff, rng))
            .collect();
        let final_gain = store.add(format!("{prefix}.final.gain"), ones_row(config.d_model));
        let final_bias = store.add(format!("{prefix}.final.bias"), DenseMatrix::zeros(1, config.d_model));
        let positions = sinusoidal_positions(config.max_len, config.d_model);
        Self {
            config,
            token_embedding,
            final_gain,
            final_bias,
            blocks,
            positions,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn token_embedding(&self) -> ParamId {
        self.token_embedding
    }

    /// Encodes several sequences into one stacked matrix. Each sequence only
    /// attends within itself. Returns the stacked node and each sequence's
    /// `(start, len)` rows.
    pub fn encode_batch(&self, g: &mut Graph, seqs: &[&TokenSequence]) -> Result<(NodeId, Vec<(usize, usize)>)> {
        let mut ids = Vec::new();
        let mut pos = DenseMatrix::zeros(seqs.iter().map(|s| s.len()).sum(), self.config.d_model);
        let mut row = 0;
        for seq in seqs {
            seq.validate(self.config.vocab_size, self.config.max_len)?;
            for (p, &t) in seq.tokens().iter().enumerate() {
                ids.push(t as usize);
                pos.row_mut(row).copy_from_slice(self.positions.row(p));
                row += 1;
            }
        }
        let segments = segments_of(seqs.iter().map(|s| s.len()));
        let blocks: Vec<AttnBlock> = segments.iter().map(|&(s, l)| AttnBlock::self_block(s, l)).collect();

        let table = g.param(self.token_embedding);
        let emb = g.gather(table, &ids)?;
        let pos = g.input(pos);
        let mut x = g.add(emb, pos)?;
        for block in &self.blocks {
            x = block.forward(g, x, &blocks, self.config.heads, false)?;
        }
        let (fg, fb) = (g.param(self.final_gain), g.param(self.final_bias));
        let x = g.layer_norm(x, fg, fb)?;
        Ok((x, segments))
    }

    /// Encodes one sequence against `store` without tracking gradients.
    pub fn encode(&self, store: &ParamStore, seq: &TokenSequence) -> Result<EncodedSequence> {
        let mut g = Graph::frozen(store);
        let (node, _) = self.encode_batch(&mut g, &[seq])?;
        Ok(EncodedSequence {
            matrix: g.value(node).clone(),
            valid_len: seq.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::GqsError;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (Encoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = Encoder::new(EncoderConfig::default(), &mut store, "enc", &mut rng);
        (enc, store)
    }

    #[test]
    fn shape_and_determinism() {
        let (enc, store) = fixture();
        let seq = TokenSequence::new(vec![10, 20, 30, 40, 50, 60, 11]);
        let a = enc.encode(&store, &seq).unwrap();
        assert_eq!(a.matrix.shape(), (7, 32));
        assert_eq!(a.valid_len, 7);
        let b = enc.encode(&store, &seq).unwrap();
        assert_eq!(a.matrix.data(), b.matrix.data());
    }

    #[test]
    fn single_token_change_changes_output() {
        let (enc, store) = fixture();
        let a = enc.encode(&store, &TokenSequence::new(vec![10, 20, 30])).unwrap();
        let b = enc.encode(&store, &TokenSequence::new(vec![10, 21, 30])).unwrap();
        assert!(a.matrix.data().iter().zip(b.matrix.data()).any(|(x, y)| x != y));
    }

    #[test]
    fn batch_matches_single_encoding() {
        let (enc, store) = fixture();
        let s1 = TokenSequence::new(vec![10, 20, 30]);
        let s2 = TokenSequence::new(vec![40, 41]);
        let mut g = Graph::frozen(&store);
        let (node, segs) = enc.encode_batch(&mut g, &[&s1, &s2]).unwrap();
        assert_eq!(segs, vec![(0, 3), (3, 2)]);
        let single = enc.encode(&store, &s2).unwrap();
        for r in 0..2 {
            for (x, y) in g.value(node).row(3 + r).iter().zip(single.matrix.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn errors() {
        let (enc, store) = fixture();
        assert!(matches!(
            enc.encode(&store, &TokenSequence::new(vec![64])),
            Err(GqsError::TokenOutOfRange { .. })
        ));
        assert!(matches!(
            enc.encode(&store, &TokenSequence::empty()),
            Err(GqsError::EmptySequence)
        ));
        assert!(matches!(
            enc.encode(&store, &TokenSequence::new(vec![10; 33])),
            Err(GqsError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn weights_are_shared_across_sequences() {
        let (enc, store) = fixture();
        let mut g = Graph::new(&store);
        let s1 = TokenSequence::new(vec![10, 11]);
        let s2 = TokenSequence::new(vec![12]);
        let before = g.len();
        enc.encode_batch(&mut g, &[&s1]).unwrap();
        let emb_node = g.param_node(enc.token_embedding()).unwrap();
        enc.encode_batch(&mut g, &[&s2]).unwrap();
        assert_eq!(g.param_node(enc.token_embedding()), Some(emb_node));
        assert!(g.len() > before);
    }

    #[test]
    fn mean_pool_fixtures() {
        let single = EncodedSequence {
            matrix: DenseMatrix::row_vector(vec![1.5, -2.0]),
            valid_len: 1,
        };
        assert_eq!(mean_pool(&single), vec![1.5, -2.0]);
        let sym = EncodedSequence {
            matrix: DenseMatrix::from_rows(&[vec![1.0, -3.0], vec![-1.0, 3.0]]).unwrap(),
            valid_len: 2,
        };
        assert_eq!(mean_pool(&sym), vec![0.0, 0.0]);
        let two = EncodedSequence {
            matrix: DenseMatrix::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap(),
            valid_len: 2,
        };
        assert_eq!(mean_pool(&two), vec![2.0, 4.0]);
    }

    proptest::proptest! {
        #[test]
        fn padding_rows_never_change_the_pool(
            rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 1..6),
            pad in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 0..4),
        ) {
            let valid = EncodedSequence { matrix: DenseMatrix::from_rows(&rows).unwrap(), valid_len: rows.len() };
            let mut all = rows.clone();
            all.extend(pad);
            let padded = EncodedSequence { matrix: DenseMatrix::from_rows(&all).unwrap(), valid_len: rows.len() };
            proptest::prop_assert_eq!(valid.mean_pool(), padded.mean_pool());
        }
    }
}
