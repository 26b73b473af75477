//! Representation center: a precomputed embedding table, a windowed
//! ingestion path for new items, a framed TCP parameter service, and analytic
//! FLOP accounting.
//!
//! Vectors are stored and served as `f32`; the rounding happens once, when
//! a vector is written, so direct and remote reads agree bit for bit.

mod client;
mod flops;
pub mod protocol;
mod server;
mod store;
mod window;

pub use client::{ParamClient, RemoteLookup};
pub use flops::{
    affine_flops, attention_flops, deepctr_flops, flop_account, flop_table, layer_flops, render_flop_table, FlopDims,
    FlopLedger, FlopParts, FlopVariant,
};
pub use server::{serve_parameters, ServerHandle};
pub use store::{precompute_table, quantize, widen, DirectEncodeLookup, EmbeddingStore, Snapshot, StoredVector};
pub use window::{rim_flush, rim_submit, SubmitAck, WindowBuffer};

use thiserror::Error;

use crate::encoders::EncoderError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RepError {
    #[error("no embedding for key {0}")]
    MissingKey(u64),
    #[error("key {key}: expected dimension {expected}, got {got}")]
    DimMismatch { key: u64, expected: usize, got: usize },
    #[error("store file: {0}")]
    StoreFile(String),
    #[error("io: {0}")]
    Io(String),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("server error {code}: {message}")]
    Remote { code: u8, message: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}
