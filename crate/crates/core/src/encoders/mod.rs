//! Backbone feature stubs, image-text alignment of the projection heads, and
//! the multi-modal encoder head (projection → fusion → MLP).

mod dma;
mod head;
mod stub;

pub use dma::{dma_align_step, dma_loss_var, pretrain_dma, DmaConfig, DmaStep};
pub use head::{tfn_fuse, BundleVars, EncoderConfig, EncoderHead, Fusion, HeadVars, ItemFeatures, MMEmbeddingBundle};
pub use stub::{mix64, unit_interval, ModalFeature, Modality, StubFeatureProvider};

pub use crate::numerics::Linear;

use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
