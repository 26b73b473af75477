use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::ciubm::{CtrConfig, CtrVariant};
use crate::csft::{CsftConfig, CsftLossWeights, LossVariant, NegSamplingConfig};
use crate::encoders::{DmaConfig, EncoderConfig, Fusion};
use crate::numerics::Optimizer;
use crate::synthdata::WorldConfig;

/// Which purchase-like signal defines the C-SFT positive pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    /// Visual-search purchases.
    #[default]
    Purchase,
    /// Clicked impressions from the CTR training split.
    Click,
    /// Any item of the purchased item's category.
    Category,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl OptimizerKind {
    pub fn build(self, lr: f64) -> Optimizer {
        match self {
            OptimizerKind::Sgd => Optimizer::sgd(lr),
            OptimizerKind::Adam => Optimizer::adam(lr),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DmaSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub lr: f64,
}

impl Default for DmaSection {
    fn default() -> Self {
        let d = DmaConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            tau: d.tau,
            lr: d.optimizer.lr(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub d_align: usize,
    pub d_mm: usize,
    pub hidden: Vec<usize>,
    pub fusion: Fusion,
    pub init_seed: u64,
    pub dma: DmaSection,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            d_align: e.d_align,
            d_mm: e.d_mm,
            hidden: e.hidden,
            fusion: e.fusion,
            init_seed: e.init_seed,
            dma: DmaSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsftSection {
    pub alpha: f64,
    pub beta: f64,
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "P")]
    pub p: usize,
    pub tau: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub epochs: usize,
    pub loss_variant: LossVariant,
    pub signal: Signal,
    pub hard_negatives: bool,
    pub seed: u64,
}

impl Default for CsftSection {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            k: 3,
            n: 8,
            p: 2,
            tau: 1.0,
            optimizer: OptimizerKind::Adam,
            lr: 0.005,
            epochs: 2,
            loss_variant: LossVariant::Standard,
            signal: Signal::Purchase,
            hard_negatives: true,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CiubmSection {
    /// Variant trained by the single-model `train-ctr` stage.
    pub variant: CtrVariant,
    pub d_id: usize,
    pub hidden: Vec<usize>,
    pub max_len: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub init_scale: f64,
    pub strict: bool,
    pub seed: u64,
}

impl Default for CiubmSection {
    fn default() -> Self {
        let c = CtrConfig::default();
        Self {
            variant: CtrVariant::Mim,
            d_id: c.d_id,
            hidden: c.hidden,
            max_len: c.max_len,
            optimizer: OptimizerKind::Adam,
            // Smaller steps over more epochs; the wider MIM input under-fits at 0.005 x 2.
            lr: 0.002,
            epochs: 4,
            batch_size: c.batch_size,
            init_scale: c.init_scale,
            strict: c.strict,
            seed: c.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RepcenterSection {
    pub bind: String,
    pub window_count: usize,
    pub window_ms: u64,
    /// Per-entity cost of running the content encoder online.
    pub fom_cost: u64,
}

impl Default for RepcenterSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:7878".into(),
            window_count: 64,
            window_ms: 100,
            fom_cost: 4_000_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Number of seeds, starting at the top-level seed.
    pub seeds: usize,
    /// Cold-start buckets.
    pub splits: usize,
    pub ablations: bool,
    /// Seeds (from the first) on which the ablation variants are also run; capped at `seeds`.
    pub ablation_seeds: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seeds: 5,
            splits: 10,
            ablations: true,
            ablation_seeds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub encoder: EncoderSection,
    pub csft: CsftSection,
    pub ciubm: CiubmSection,
    pub repcenter: RepcenterSection,
    pub eval: EvalSection,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.world
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.csft_config(self.seed)
            .sampling
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.encoder.d_align != self.encoder.d_mm {
            return bad(format!(
                "encoder.d_align ({}) must equal encoder.d_mm ({}): queries are compared with multi-modal embeddings",
                self.encoder.d_align, self.encoder.d_mm
            ));
        }
        if self.encoder.d_align == 0 || self.ciubm.d_id == 0 || self.ciubm.max_len == 0 {
            return bad("dimensions must be at least 1".into());
        }
        if self.csft.alpha < 0.0 || self.csft.beta < 0.0 {
            return bad("csft.alpha and csft.beta must be non-negative".into());
        }
        if !(self.encoder.dma.tau > 0.0) {
            return bad("encoder.dma.tau must be positive".into());
        }
        for (name, lr) in [
            ("csft.lr", self.csft.lr),
            ("ciubm.lr", self.ciubm.lr),
            ("encoder.dma.lr", self.encoder.dma.lr),
        ] {
            if !(lr > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.eval.seeds == 0 || self.eval.splits == 0 {
            return bad("eval.seeds and eval.splits must be at least 1".into());
        }
        Ok(())
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash12(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// Seeds of the evaluation, in order.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.eval.seeds as u64).map(|i| self.seed + i).collect()
    }

    pub fn world_config(&self, seed: u64) -> WorldConfig {
        WorldConfig {
            seed,
            ..self.world.clone()
        }
    }

    pub fn encoder_config(&self, seed: u64) -> EncoderConfig {
        EncoderConfig {
            d_img: self.world.d_img,
            d_txt: self.world.d_txt,
            d_align: self.encoder.d_align,
            d_mm: self.encoder.d_mm,
            hidden: self.encoder.hidden.clone(),
            fusion: self.encoder.fusion,
            init_seed: self.encoder.init_seed.wrapping_add(seed),
        }
    }

    pub fn dma_config(&self, seed: u64) -> DmaConfig {
        DmaConfig {
            epochs: self.encoder.dma.epochs,
            batch_size: self.encoder.dma.batch_size,
            tau: self.encoder.dma.tau,
            optimizer: Optimizer::adam(self.encoder.dma.lr),
            seed: seed.wrapping_mul(31).wrapping_add(5),
        }
    }

    pub fn csft_config(&self, seed: u64) -> CsftConfig {
        let c = &self.csft;
        CsftConfig {
            sampling: NegSamplingConfig {
                batch_size: c.n,
                k: c.k,
                workers: c.p,
                tau: c.tau,
                hard_negatives: c.hard_negatives,
            },
            weights: CsftLossWeights {
                alpha: c.alpha,
                beta: c.beta,
            },
            loss_variant: c.loss_variant,
            optimizer: c.optimizer.build(c.lr),
            epochs: c.epochs,
            seed: c.seed.wrapping_add(seed),
        }
    }

    pub fn ctr_config(&self, seed: u64) -> CtrConfig {
        let c = &self.ciubm;
        CtrConfig {
            d_id: c.d_id,
            hidden: c.hidden.clone(),
            max_len: c.max_len,
            epochs: c.epochs,
            batch_size: c.batch_size,
            optimizer: c.optimizer.build(c.lr),
            init_scale: c.init_scale,
            strict: c.strict,
            seed: c.seed.wrapping_add(seed),
        }
    }
}
