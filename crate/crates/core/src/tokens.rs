//! Token ids shared by the simulator, the encoder and the policy.
//!
//! Ids below [`RESERVED`] are structural; content tokens start at [`RESERVED`].

use serde::{Deserialize, Serialize};

use crate::error::{GqsError, Result};

/// Separates queries inside a serialized suggestion list.
pub const SEP: u32 = 0;
/// Terminates a serialized suggestion list.
pub const END: u32 = 1;
/// Stands in for a missing source.
pub const EMPTY: u32 = 2;
/// Marks the start of generation in a policy prompt.
pub const GEN: u32 = 3;
/// First source-tag id; see [`SourceSlot::tag`].
pub const TAG_BASE: u32 = 4;
/// Number of structural ids.
pub const RESERVED: u32 = 10;

/// Ordered list of token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self(tokens)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }

    /// Checks the encoder contract: non-empty, at most `max_len`, every id below `vocab`.
    pub fn validate(&self, vocab: usize, max_len: usize) -> Result<()> {
        if self.0.is_empty() {
            return Err(GqsError::EmptySequence);
        }
        if self.0.len() > max_len {
            return Err(GqsError::SequenceTooLong {
                len: self.0.len(),
                max: max_len,
            });
        }
        if let Some(&token) = self.0.iter().find(|&&t| t as usize >= vocab) {
            return Err(GqsError::TokenOutOfRange { token, vocab });
        }
        Ok(())
    }

    /// Joins sequences with [`SEP`] between them.
    pub fn join(parts: &[TokenSequence]) -> Self {
        let mut out = Vec::new();
        for (i, p) in parts.iter().enumerate() {
            if i > 0 {
                out.push(SEP);
            }
            out.extend_from_slice(&p.0);
        }
        Self(out)
    }

    /// `[tag] ++ tokens`, or `[tag, EMPTY]` when empty.
    pub fn tagged(&self, tag: u32) -> Self {
        let mut out = Vec::with_capacity(self.0.len() + 1);
        out.push(tag);
        if self.0.is_empty() {
            out.push(EMPTY);
        } else {
            out.extend_from_slice(&self.0);
        }
        Self(out)
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

/// Context slots seen by the click model, in input order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SourceSlot {
    CurrentQuery,
    AssistantResponse,
    History,
    UserProfile,
    CooQueries,
    PriorQueries,
}

impl SourceSlot {
    pub const ALL: [SourceSlot; 6] = [
        SourceSlot::CurrentQuery,
        SourceSlot::AssistantResponse,
        SourceSlot::History,
        SourceSlot::UserProfile,
        SourceSlot::CooQueries,
        SourceSlot::PriorQueries,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> u32 {
        TAG_BASE + self as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_fit_inside_reserved_range() {
        for slot in SourceSlot::ALL {
            assert!(slot.tag() >= TAG_BASE && slot.tag() < RESERVED);
        }
    }

    #[test]
    fn validation() {
        let seq = TokenSequence::new(vec![10, 11, 63]);
        assert!(seq.validate(64, 32).is_ok());
        assert!(matches!(
            seq.validate(63, 32),
            Err(GqsError::TokenOutOfRange { token: 63, .. })
        ));
        assert!(matches!(seq.validate(64, 2), Err(GqsError::SequenceTooLong { .. })));
        assert!(matches!(
            TokenSequence::empty().validate(64, 32),
            Err(GqsError::EmptySequence)
        ));
    }

    #[test]
    fn join_and_tag() {
        let a = TokenSequence::new(vec![11, 12]);
        let b = TokenSequence::new(vec![13]);
        assert_eq!(TokenSequence::join(&[a.clone(), b]).tokens(), &[11, 12, SEP, 13]);
        assert_eq!(a.tagged(5).tokens(), &[5, 11, 12]);
        assert_eq!(TokenSequence::empty().tagged(5).tokens(), &[5, EMPTY]);
    }
}
