//! Multi-source contextual click-through-rate model.
//!
//! Each context source and the prior queries of the list are encoded with a
//! shared encoder, cross-attended from the candidate query, pooled, and
//! concatenated with a learned position embedding before an MLP head.

mod data;
mod model;
mod train;

pub(crate) use data::group_by_response;
pub use data::{read_jsonl, validate_records, write_jsonl, ClickRecord, ResponseWeights};
pub use model::{cross_attend, CrossAttentionParams, CtrConfig, CtrModel, CtrScore};
pub use train::{shuffle_labels, split_by_response, train_ctr, CtrCheckpoint, CtrTrainConfig, CtrTrainReport};
