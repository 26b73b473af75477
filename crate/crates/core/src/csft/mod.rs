//! Contrastive fine-tuning of the encoder head on query→purchase pairs.
//!
//! Each purchase becomes a triplet `(query, purchased item, same-category
//! hard negative)`. Negatives for a query are every positive and hard negative
//! from the newest `k + 1` batches of all `P` simulated workers except its own
//! positive. Pooled entries are detached copies; only the anchor worker's
//! current batch carries gradient.

mod loss;
mod pool;
mod train;
mod triplets;

pub(crate) use loss::worker_loss_var;
pub use loss::{csft_loss, infonce, infonce_var, CsftLossWeights, LossVariant};
pub use pool::{expected_negatives, pool_gather, NegSamplingConfig, NegativePool, PoolRef, PooledBatch, Slot};
pub use train::{
    evaluate_alignment, train_csft, AlignmentStats, CsftConfig, CsftOutcome, FeatureSource, TrainingBatch,
};
pub use triplets::{build_triplets, read_triplets, write_triplets, InterestTriplet, RejectedRow, TripletBuild};

use thiserror::Error;

use crate::encoders::EncoderError;
use crate::numerics::NumericsError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CsftError {
    #[error("no triplets to train on")]
    EmptyTriplets,
    #[error("invalid negative sampling config: {0}")]
    InvalidConfig(String),
    #[error("anchor index {index} out of range for batch of {len}")]
    AnchorOutOfRange { index: usize, len: usize },
    #[error("worker {index} out of range for {workers} workers")]
    WorkerOutOfRange { index: usize, workers: usize },
    #[error("pool has no batch for worker {0}")]
    ColdPool(usize),
    #[error("no features for key {0}")]
    MissingFeature(u64),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("triplet file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
