//! Small fixtures shared by unit tests.

use crate::context::ContextBundle;
use crate::ctr::{ClickRecord, CtrConfig};
use crate::encoder::EncoderConfig;
use crate::tokens::TokenSequence;

pub(crate) fn seq(tokens: &[u32]) -> TokenSequence {
    TokenSequence::new(tokens.to_vec())
}

pub(crate) fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 24,
        d_model: 4,
        heads: 2,
        d_ff: 6,
        layers: 1,
        max_len: 16,
    }
}

pub(crate) fn tiny_ctr() -> CtrConfig {
    CtrConfig {
        encoder: tiny_encoder(),
        d_attn: 3,
        d_pos: 2,
        n_max: 4,
        hidden: vec![5],
        per_source_attention: false,
    }
}

pub(crate) fn context(shift: u32) -> ContextBundle {
    ContextBundle {
        current_query: seq(&[10 + shift, 11 + shift]),
        assistant_response: seq(&[12 + shift, 13, 14 + shift]),
        history: seq(&[15]),
        user_profile: seq(&[16 + shift]),
        coo_queries: TokenSequence::empty(),
        latent: None,
    }
}

/// Two lists of two records each, with both labels present.
pub(crate) fn records() -> Vec<ClickRecord> {
    let mk = |ctx: &ContextBundle, q: &[u32], position, label, id: &str| ClickRecord {
        context: ctx.clone(),
        suggestion: seq(q),
        position,
        label,
        policy_id: "p0".into(),
        response_id: id.into(),
    };
    let (a, b) = (context(0), context(3));
    vec![
        mk(&a, &[17, 18], 1, 1, "r0"),
        mk(&a, &[19], 2, 0, "r0"),
        mk(&b, &[20, 21, 22], 1, 0, "r1"),
        mk(&b, &[23, 10], 2, 1, "r1"),
    ]
}
