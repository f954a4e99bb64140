use serde::{Deserialize, Serialize};

use crate::tokens::{SourceSlot, TokenSequence, GEN};

/// Simulator-only facts about a session. Never part of any model input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Latent {
    pub topic: usize,
    pub user: usize,
}

/// One conversation turn: the five context sources a suggestion is generated from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContextBundle {
    pub current_query: TokenSequence,
    pub assistant_response: TokenSequence,
    pub history: TokenSequence,
    pub user_profile: TokenSequence,
    pub coo_queries: TokenSequence,
    #[serde(skip)]
    pub latent: Option<Latent>,
}

impl ContextBundle {
    /// The model-visible sources in slot order (everything but prior queries).
    pub fn sources(&self) -> [(SourceSlot, &TokenSequence); 5] {
        [
            (SourceSlot::CurrentQuery, &self.current_query),
            (SourceSlot::AssistantResponse, &self.assistant_response),
            (SourceSlot::History, &self.history),
            (SourceSlot::UserProfile, &self.user_profile),
            (SourceSlot::CooQueries, &self.coo_queries),
        ]
    }

    /// Flattened policy prompt: every source behind its tag, then [`GEN`].
    pub fn prompt_tokens(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for (slot, seq) in self.sources() {
            out.extend_from_slice(seq.tagged(slot.tag()).tokens());
        }
        out.push(GEN);
        out
    }

    /// Copy without the latent fields.
    pub fn visible(&self) -> Self {
        Self {
            latent: None,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::EMPTY;

    #[test]
    fn latent_fields_never_serialize() {
        let ctx = ContextBundle {
            current_query: vec![10, 11].into(),
            latent: Some(Latent { topic: 3, user: 1 }),
            ..Default::default()
        };
        let json = serde_json::to_string(&ctx).unwrap();
        assert!(!json.contains("latent"));
        let back: ContextBundle = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ctx.visible());
    }

    #[test]
    fn prompt_layout() {
        let ctx = ContextBundle {
            current_query: vec![10, 11].into(),
            ..Default::default()
        };
        let p = ctx.prompt_tokens();
        assert_eq!(&p[..3], &[SourceSlot::CurrentQuery.tag(), 10, 11]);
        assert_eq!(&p[3..5], &[SourceSlot::AssistantResponse.tag(), EMPTY]);
        assert_eq!(*p.last().unwrap(), GEN);
        assert_eq!(p.len(), 3 + 4 * 2 + 1);
    }
}
