//! Suggestion lists and the grammar of their serialized form.
//!
//! A list of `n` queries serializes as `q1 SEP q2 SEP … qn END`. Every query
//! holds between 1 and `max_query_len` content tokens.

use serde::{Deserialize, Serialize};

use crate::error::{GqsError, Result};
use crate::tokens::{TokenSequence, END, RESERVED, SEP};

/// An ordered response of `n` suggested queries; position `j` is index `j - 1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SuggestionList {
    queries: Vec<TokenSequence>,
}

impl SuggestionList {
    pub fn new(queries: Vec<TokenSequence>) -> Self {
        Self { queries }
    }

    pub fn queries(&self) -> &[TokenSequence] {
        &self.queries
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn serialize(&self) -> Vec<u32> {
        let mut out = TokenSequence::join(&self.queries).into_inner();
        out.push(END);
        out
    }

    /// Parses a serialized list, requiring exactly `n` non-empty queries.
    pub fn parse(tokens: &[u32], n: usize) -> Result<Self> {
        let Some((&END, body)) = tokens.split_last() else {
            return Err(GqsError::InvalidArgument("list does not end with END".into()));
        };
        let queries: Vec<TokenSequence> = body
            .split(|&t| t == SEP)
            .map(|q| TokenSequence::new(q.to_vec()))
            .collect();
        if queries.len() != n {
            return Err(GqsError::InvalidArgument(format!(
                "expected {n} queries, found {}",
                queries.len()
            )));
        }
        if queries
            .iter()
            .any(|q| q.is_empty() || q.tokens().iter().any(|&t| t < RESERVED))
        {
            return Err(GqsError::InvalidArgument("malformed query in list".into()));
        }
        Ok(Self { queries })
    }

    /// Queries at positions `< position` joined with SEP (the prior-queries source).
    pub fn prior_queries(&self, position: usize) -> TokenSequence {
        TokenSequence::join(&self.queries[..position.saturating_sub(1).min(self.queries.len())])
    }
}

/// Decoding grammar for serialized lists.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResponseGrammar {
    pub n: usize,
    pub max_query_len: usize,
    pub vocab: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GrammarState {
    pub queries_done: usize,
    pub current_len: usize,
    pub finished: bool,
}

impl ResponseGrammar {
    pub fn max_tokens(&self) -> usize {
        self.n * (self.max_query_len + 1)
    }

    pub fn allowed(&self, st: GrammarState) -> Vec<bool> {
        let mut mask = vec![false; self.vocab];
        if st.finished {
            return mask;
        }
        let last = st.queries_done + 1 == self.n;
        if st.current_len < self.max_query_len {
            mask[RESERVED as usize..].iter_mut().for_each(|m| *m = true);
        }
        if st.current_len > 0 {
            mask[if last { END } else { SEP } as usize] = true;
        }
        mask
    }

    pub fn advance(&self, st: GrammarState, token: u32) -> Result<GrammarState> {
        if (token as usize) >= self.vocab || !self.allowed(st)[token as usize] {
            return Err(GqsError::InvalidArgument(format!("token {token} not allowed here")));
        }
        Ok(match token {
            SEP => GrammarState {
                queries_done: st.queries_done + 1,
                current_len: 0,
                finished: false,
            },
            END => GrammarState {
                queries_done: st.queries_done + 1,
                current_len: 0,
                finished: true,
            },
            _ => GrammarState {
                current_len: st.current_len + 1,
                ..st
            },
        })
    }

    /// Masks for predicting each token of `tokens` in turn.
    pub fn masks_for(&self, tokens: &[u32]) -> Result<Vec<Vec<bool>>> {
        let mut st = GrammarState::default();
        let mut out = Vec::with_capacity(tokens.len());
        for &t in tokens {
            out.push(self.allowed(st));
            st = self.advance(st, t)?;
        }
        if !st.finished {
            return Err(GqsError::InvalidArgument("serialized list is incomplete".into()));
        }
        Ok(out)
    }
}
