//! Frozen similarity embedding used by the diversity rubric, the relevance
//! rubric and nearest-neighbour COO retrieval.
//!
//! Each token maps to a fixed one-hot row, so the mean-pooled embedding of a
//! sequence is its normalised token histogram. Cosine similarity is then
//! exact token-overlap similarity.

use crate::tokens::TokenSequence;

fn histogram(seq: &TokenSequence) -> Vec<(u32, f64)> {
    let mut tokens = seq.tokens().to_vec();
    tokens.sort_unstable();
    let mut out: Vec<(u32, f64)> = Vec::new();
    for t in tokens {
        match out.last_mut() {
            Some((last, c)) if *last == t => *c += 1.0,
            _ => out.push((t, 1.0)),
        }
    }
    out
}

/// Mean-pooled one-hot embedding as a dense vector of width `vocab`.
pub fn embed(seq: &TokenSequence, vocab: usize) -> Vec<f64> {
    let mut out = vec![0.0; vocab];
    if seq.is_empty() {
        return out;
    }
    let inv = 1.0 / seq.len() as f64;
    for &t in seq.tokens() {
        if (t as usize) < vocab {
            out[t as usize] += inv;
        }
    }
    out
}

/// Cosine similarity of the pooled embeddings; 0 when either side is empty.
pub fn cosine(a: &TokenSequence, b: &TokenSequence) -> f64 {
    let (ha, hb) = (histogram(a), histogram(b));
    if ha.is_empty() || hb.is_empty() {
        return 0.0;
    }
    let norm = |h: &[(u32, f64)]| h.iter().map(|(_, c)| c * c).sum::<f64>().sqrt();
    let (mut i, mut j, mut dot) = (0, 0, 0.0);
    while i < ha.len() && j < hb.len() {
        match ha[i].0.cmp(&hb[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                dot += ha[i].1 * hb[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    dot / (norm(&ha) * norm(&hb))
}
