//! Multi-modal content interest modeling for CTR prediction.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`numerics`]: tensors, a reverse-mode tape, and a finite-difference oracle.
//! - [`encoders`]: stub backbone features, image-text alignment, and the
//!   fusion encoder head.
//! - [`csft`]: contrastive fine-tuning on query→purchase triplets with
//!   space-time negative pooling and a multi-level loss.
//! - [`ciubm`]: the behavior CTR model with ID, content, and fusion interest.
//! - [`repcenter`]: precomputed embedding table, windowed real-time ingestion,
//!   a framed TCP parameter service, and analytic FLOP accounting.
//! - [`synthdata`]: a synthetic catalog and click model with known ground truth.
//! - [`pipeline`]: configuration, stage orchestration, and run reports.

// `!(x > 0.0)` is how validation rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ciubm;
pub mod csft;
pub mod encoders;
pub mod numerics;
pub mod pipeline;
pub mod repcenter;
pub mod synthdata;
