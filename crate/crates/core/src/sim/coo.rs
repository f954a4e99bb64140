//! Co-occurrence (COO) dictionary over logged query sessions.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::ContextBundle;
use crate::error::{GqsError, Result};
use crate::similarity::cosine;
use crate::tokens::TokenSequence;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CooEntry {
    pub query: TokenSequence,
    pub count: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct CooRow {
    query: TokenSequence,
    co_queries: Vec<CooEntry>,
}

/// Query → co-occurring queries with counts, sorted by count descending
/// (ties keep first-occurrence order). Keys keep first-occurrence order too.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<CooRow>", into = "Vec<CooRow>")]
pub struct CooDictionary {
    keys: Vec<TokenSequence>,
    lists: Vec<Vec<CooEntry>>,
    index: HashMap<TokenSequence, usize>,
}

impl From<Vec<CooRow>> for CooDictionary {
    fn from(rows: Vec<CooRow>) -> Self {
        let mut dict = CooDictionary::default();
        for row in rows {
            dict.index.insert(row.query.clone(), dict.keys.len());
            dict.keys.push(row.query);
            dict.lists.push(row.co_queries);
        }
        dict
    }
}

impl From<CooDictionary> for Vec<CooRow> {
    fn from(dict: CooDictionary) -> Self {
        dict.keys
            .into_iter()
            .zip(dict.lists)
            .map(|(query, co_queries)| CooRow { query, co_queries })
            .collect()
    }
}

impl CooDictionary {
    /// Counts every `(query, next_query)` pair.
    pub fn build(sessions: &[(TokenSequence, TokenSequence)]) -> Self {
        let mut dict = CooDictionary::default();
        for (q, next) in sessions {
            let slot = match dict.index.get(q) {
                Some(&i) => i,
                None => {
                    dict.index.insert(q.clone(), dict.keys.len());
                    dict.keys.push(q.clone());
                    dict.lists.push(Vec::new());
                    dict.keys.len() - 1
                }
            };
            let list = &mut dict.lists[slot];
            match list.iter_mut().find(|e| &e.query == next) {
                Some(e) => e.count += 1,
                None => list.push(CooEntry {
                    query: next.clone(),
                    count: 1,
                }),
            }
        }
        for list in &mut dict.lists {
            list.sort_by_key(|e| std::cmp::Reverse(e.count));
        }
        dict
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[TokenSequence] {
        &self.keys
    }

    pub fn get(&self, query: &TokenSequence) -> Option<&[CooEntry]> {
        self.index.get(query).map(|&i| self.lists[i].as_slice())
    }

    /// Key closest to `query` by cosine similarity; ties go to the earlier key.
    pub fn nearest_key(&self, query: &TokenSequence) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, key) in self.keys.iter().enumerate() {
            let sim = cosine(query, key);
            if best.is_none_or(|(_, b)| sim > b) {
                best = Some((i, sim));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Top-`k` co-occurring queries: by exact key when present, otherwise
    /// from the most similar key.
    pub fn retrieve(&self, query: &TokenSequence, k: usize) -> Vec<TokenSequence> {
        if k == 0 {
            return Vec::new();
        }
        let slot = self.index.get(query).copied().or_else(|| self.nearest_key(query));
        slot.map(|i| self.lists[i].iter().take(k).map(|e| e.query.clone()).collect())
            .unwrap_or_default()
    }

    /// Fills the context's COO slot with the retrieved queries joined by SEP.
    pub fn refill(&self, context: &mut ContextBundle, k: usize) {
        context.coo_queries = TokenSequence::join(&self.retrieve(&context.current_query, k));
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| GqsError::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GqsError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Free-function form of [`CooDictionary::build`].
pub fn build_coo(sessions: &[(TokenSequence, TokenSequence)]) -> CooDictionary {
    CooDictionary::build(sessions)
}

/// Free-function form of [`CooDictionary::retrieve`].
pub fn retrieve_coo(query: &TokenSequence, dict: &CooDictionary, k: usize) -> Vec<TokenSequence> {
    dict.retrieve(query, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn s(v: &[u32]) -> TokenSequence {
        TokenSequence::new(v.to_vec())
    }

    #[test]
    fn counting_fixture() {
        let (a, b, c) = (s(&[10]), s(&[11]), s(&[12]));
        let d = build_coo(&[(a.clone(), b.clone()), (a.clone(), b.clone()), (a.clone(), c.clone())]);
        assert_eq!(
            d.get(&a).unwrap(),
            &[
                CooEntry {
                    query: b.clone(),
                    count: 2
                },
                CooEntry {
                    query: c.clone(),
                    count: 1
                }
            ]
        );
        assert_eq!(retrieve_coo(&a, &d, 2), vec![b, c]);
        assert!(retrieve_coo(&a, &d, 0).is_empty());
        assert!(build_coo(&[]).is_empty());
    }

    #[test]
    fn ties_keep_first_occurrence() {
        let (a, b, c) = (s(&[10]), s(&[11]), s(&[12]));
        let d = build_coo(&[(a.clone(), c.clone()), (a.clone(), b.clone())]);
        let got: Vec<_> = d.get(&a).unwrap().iter().map(|e| e.query.clone()).collect();
        assert_eq!(got, vec![c, b]);
    }

    #[test]
    fn miss_falls_back_to_nearest_key() {
        let d = build_coo(&[(s(&[10, 11, 12, 13]), s(&[20])), (s(&[30, 31, 32, 33]), s(&[40]))]);
        assert_eq!(d.retrieve(&s(&[30, 31, 32, 50]), 1), vec![s(&[40])]);
    }

    #[test]
    fn matches_hash_count_oracle() {
        let mut rng = rng::stream(4, "coo", 0);
        let sessions: Vec<_> = (0..1000)
            .map(|_| (s(&[10 + rng.gen_range(0..20)]), s(&[40 + rng.gen_range(0..10)])))
            .collect();
        let d = build_coo(&sessions);
        let mut oracle: HashMap<(TokenSequence, TokenSequence), u32> = HashMap::new();
        for (q, n) in &sessions {
            *oracle.entry((q.clone(), n.clone())).or_default() += 1;
        }
        let total: usize = d.keys().iter().map(|k| d.get(k).unwrap().len()).sum();
        assert_eq!(total, oracle.len());
        for key in d.keys() {
            let list = d.get(key).unwrap();
            assert!(list.windows(2).all(|w| w[0].count >= w[1].count));
            for e in list {
                assert!(e.count >= 1);
                assert_eq!(oracle[&(key.clone(), e.query.clone())], e.count);
            }
        }
    }

    #[test]
    fn json_roundtrip() {
        let d = build_coo(&[(s(&[10]), s(&[11])), (s(&[12]), s(&[11]))]);
        let json = serde_json::to_string(&d).unwrap();
        let back: CooDictionary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.retrieve(&s(&[12]), 1), vec![s(&[11])]);
    }
}
