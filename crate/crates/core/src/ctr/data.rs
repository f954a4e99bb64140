use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::ContextBundle;
use crate::error::{GqsError, Result};
use crate::tokens::TokenSequence;

/// One displayed suggestion and whether it was clicked.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickRecord {
    pub context: ContextBundle,
    pub suggestion: TokenSequence,
    pub position: usize,
    pub label: u8,
    pub policy_id: String,
    pub response_id: String,
}

/// Importance weights keyed by response id.
pub type ResponseWeights = HashMap<String, f64>;

/// Records of one displayed list, in position order.
#[derive(Clone, Debug)]
pub(crate) struct ListGroup<'a> {
    pub response_id: &'a str,
    pub records: Vec<&'a ClickRecord>,
    /// Index of each record in the input slice.
    pub indices: Vec<usize>,
}

impl ListGroup<'_> {
    pub fn context(&self) -> &ContextBundle {
        &self.records[0].context
    }

    /// Suggestions shown above `position`, joined with SEP.
    pub fn prior_for(&self, position: usize) -> TokenSequence {
        let before: Vec<TokenSequence> = self
            .records
            .iter()
            .filter(|r| r.position < position)
            .map(|r| r.suggestion.clone())
            .collect();
        TokenSequence::join(&before)
    }
}

/// Groups records by response id, preserving first-appearance order.
pub(crate) fn group_by_response(records: &[ClickRecord]) -> Vec<ListGroup<'_>> {
    let mut order: Vec<ListGroup> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        let slot = *index.entry(r.response_id.as_str()).or_insert_with(|| {
            order.push(ListGroup {
                response_id: r.response_id.as_str(),
                records: Vec::new(),
                indices: Vec::new(),
            });
            order.len() - 1
        });
        order[slot].records.push(r);
        order[slot].indices.push(i);
    }
    for g in &mut order {
        let mut pairs: Vec<(usize, &ClickRecord)> = g.indices.iter().copied().zip(g.records.iter().copied()).collect();
        pairs.sort_by_key(|(_, r)| r.position);
        g.indices = pairs.iter().map(|p| p.0).collect();
        g.records = pairs.into_iter().map(|p| p.1).collect();
    }
    order
}

pub fn validate_records(records: &[ClickRecord]) -> Result<()> {
    for r in records {
        if r.label > 1 {
            return Err(GqsError::InvalidArgument(format!("label {} is not 0/1", r.label)));
        }
    }
    for g in group_by_response(records) {
        let first = g.records[0];
        if g.records
            .iter()
            .any(|r| r.policy_id != first.policy_id || r.context.visible() != first.context.visible())
        {
            return Err(GqsError::InvalidArgument(format!(
                "response {} mixes contexts or policies",
                g.response_id
            )));
        }
    }
    Ok(())
}

pub fn write_jsonl(path: &Path, records: &[ClickRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| GqsError::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| GqsError::io(path, e))?;
    }
    out.flush().map_err(|e| GqsError::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ClickRecord>> {
    let file = std::fs::File::open(path).map_err(|e| GqsError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| GqsError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    validate_records(&out)?;
    Ok(out)
}
