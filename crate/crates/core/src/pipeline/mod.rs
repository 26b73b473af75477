//! Configuration, stage orchestration, the ablation harness, and run reports.

mod config;
mod gradsuite;
mod report;
mod source;
mod stages;
mod trial;

pub use config::{
    CiubmSection, CsftSection, DmaSection, EncoderSection, EvalSection, OptimizerKind, PipelineConfig,
    RepcenterSection, Signal,
};
pub use gradsuite::{gradient_suite, GradCheck, OPS as GRADIENT_OPS, TOLERANCE as GRADIENT_TOLERANCE};
pub use report::{flop_dims, render_summary, run_eval, summarize, AblationRow, RunReport, Summary, VariantSummary};
pub use source::WorldSource;
pub use stages::{metrics_text, CsftSectionReport, DataSection, RunDir, RunDirReport, StoreSection};
pub use trial::{
    build_store, resolve_split, run_seed, seed_triplets, signal_pairs, train_and_score, train_encoder, AblationEntry,
    CtrReport, EncoderAblation, EncoderReport, ResolvedSplit, SeedData, SeedReport, ABLATIONS,
};

use thiserror::Error;

use crate::ciubm::CiubmError;
use crate::csft::CsftError;
use crate::encoders::EncoderError;
use crate::numerics::NumericsError;
use crate::repcenter::RepError;
use crate::synthdata::SynthError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Csft(#[from] CsftError),
    #[error(transparent)]
    Ciubm(#[from] CiubmError),
    #[error(transparent)]
    Rep(#[from] RepError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invariant: {0}")]
    Invariant(String),
}

impl PipelineError {
    /// Short machine-readable class.
    pub fn class(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "invalid_config",
            PipelineError::MissingArtifact(_) => "missing_artifact",
            _ => "internal",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::MissingArtifact(_) => 3,
            _ => 4,
        }
    }
}
