//! Content-interest-aware behavior modeling for CTR prediction.
//!
//! The deep CTR input is `[h_B^ID, h_B^MM, h_B^Fusion]` (the subset kept by
//! the [`CtrVariant`]) followed by side features: user embedding, raw query
//! image feature, target ID embedding, target multi-modal embedding, and a
//! bit marking a target missing from the embedding store.

mod interest;
mod io;
mod metrics;
mod model;
mod train;

pub use interest::{
    content_interest, content_interest_var, fusion_interest, fusion_interest_var, id_interest, id_interest_var,
    InterestVector,
};
pub use io::{read_dataset, write_dataset};
pub use metrics::auc;
pub use model::{
    ciubm_forward, CtrConfig, CtrModel, CtrVariant, IdEmbeddingTable, MmEntry, MmLookup, QueryFeatures, ResolvedSample,
};
pub use train::{predict, train_ctr, train_resolved, BatchGradients};

use thiserror::Error;

use crate::numerics::NumericsError;

/// One impression: who searched what, which item was shown, their history,
/// and whether they clicked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BehaviorSample {
    pub user_key: u64,
    pub query_key: u64,
    pub target_key: u64,
    /// Oldest first. Only the last `max_len` entries are used.
    pub behavior_keys: Vec<u64>,
    pub label: u8,
}

impl BehaviorSample {
    /// Last `max_len` behaviors zero-padded to `max_len`, with the validity mask.
    pub fn padded(&self, max_len: usize) -> (Vec<u64>, Vec<bool>) {
        let start = self.behavior_keys.len().saturating_sub(max_len);
        let mut keys = self.behavior_keys[start..].to_vec();
        let mut mask = vec![true; keys.len()];
        keys.resize(max_len, 0);
        mask.resize(max_len, false);
        (keys, mask)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CiubmError {
    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("label {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("auc needs both classes, got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("score and label counts differ ({scores} vs {labels})")]
    CountMismatch { scores: usize, labels: usize },
    #[error("no embedding for key {0}")]
    MissingKey(u64),
    #[error("no feature for query {0}")]
    MissingQuery(u64),
    #[error("lookup failed: {0}")]
    Lookup(String),
    #[error("dataset line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_keeps_most_recent() {
        let s = BehaviorSample {
            user_key: 1,
            query_key: 2,
            target_key: 3,
            behavior_keys: vec![10, 11, 12],
            label: 1,
        };
        assert_eq!(s.padded(2), (vec![11, 12], vec![true, true]));
        assert_eq!(s.padded(4), (vec![10, 11, 12, 0], vec![true, true, true, false]));
    }
}
