use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::trial::{run_seed, SeedReport, ABLATIONS};
use super::PipelineError;
use crate::ciubm::CtrVariant;
use crate::csft::AlignmentStats;
use crate::repcenter::{flop_table, FlopDims, FlopLedger};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: CtrVariant,
    pub mean_auc: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub mean_auc: f64,
    /// Mean AUC difference to base on the same seeds.
    pub mean_gain: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub variants: Vec<VariantSummary>,
    /// Mean `AUC(base+mim) − AUC(base)`.
    pub mean_gain: f64,
    /// Mean gain per cold-start bucket, newest first, over seeds where it is defined.
    pub bucket_gain: Vec<Option<f64>>,
    pub category_gain: Vec<Option<f64>>,
    pub alignment: AlignmentStats,
    pub ablation_table: Vec<AblationRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub config: PipelineConfig,
    pub per_seed: Vec<SeedReport>,
    pub summary: Summary,
    pub flops: Vec<FlopLedger>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// FLOP dimensions implied by a config.
pub fn flop_dims(cfg: &PipelineConfig) -> FlopDims {
    FlopDims {
        behaviors: cfg.ciubm.max_len,
        d_id: cfg.ciubm.d_id,
        d_mm: cfg.encoder.d_mm,
        d_query: cfg.world.d_img,
        deepctr_hidden: cfg.ciubm.hidden.clone(),
        d_img: cfg.world.d_img,
        d_txt: cfg.world.d_txt,
        d_align: cfg.encoder.d_align,
        encoder_hidden: cfg.encoder.hidden.clone(),
        fusion: cfg.encoder.fusion,
        fom_cost: cfg.repcenter.fom_cost,
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn gains(per_seed: &[SeedReport], pick: impl Fn(&crate::pipeline::CtrReport) -> &Vec<Option<f64>>) -> Vec<Option<f64>> {
    let pairs: Vec<_> = per_seed.iter().map(|s| (pick(&s.ctr[0]), pick(&s.ctr[1]))).collect();
    let n = pairs.first().map_or(0, |p| p.0.len());
    (0..n)
        .map(|g| mean(pairs.iter().filter_map(|(b, m)| Some(m[g]? - b[g]?))))
        .collect()
}

pub fn summarize(per_seed: &[SeedReport]) -> Summary {
    let variants = CtrVariant::ALL
        .iter()
        .filter_map(|&v| {
            let aucs: Vec<f64> = per_seed
                .iter()
                .filter_map(|s| {
                    s.ctr
                        .iter()
                        .find(|c| c.variant == v && c.encoder == super::EncoderAblation::Full)
                })
                .map(|c| c.auc)
                .collect();
            Some(VariantSummary {
                variant: v,
                seeds: aucs.len(),
                mean_auc: mean(aucs)?,
            })
        })
        .collect();
    let ablation_table = ABLATIONS
        .iter()
        .filter_map(|&(name, _, _)| {
            let rows: Vec<_> = per_seed
                .iter()
                .filter_map(|s| s.ablations.iter().find(|a| a.name == name))
                .collect();
            Some(AblationRow {
                name: name.to_string(),
                seeds: rows.len(),
                mean_auc: mean(rows.iter().map(|r| r.auc))?,
                mean_gain: mean(rows.iter().map(|r| r.gain))?,
            })
        })
        .collect();
    let full = |s: &SeedReport| s.encoders[0].alignment;
    Summary {
        variants,
        mean_gain: mean(per_seed.iter().map(|s| s.ctr[1].auc - s.ctr[0].auc)).unwrap_or(0.0),
        bucket_gain: gains(per_seed, |c| &c.bucket_auc),
        category_gain: gains(per_seed, |c| &c.category_auc),
        alignment: AlignmentStats {
            positive: mean(per_seed.iter().map(|s| full(s).positive)).unwrap_or(0.0),
            random: mean(per_seed.iter().map(|s| full(s).random)).unwrap_or(0.0),
        },
        ablation_table,
    }
}

/// Runs every seed of the evaluation and assembles the report.
pub fn run_eval(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    let seeds = cfg.seeds();
    let per_seed = seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| run_seed(cfg, seed, cfg.eval.ablations && i < cfg.eval.ablation_seeds))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RunReport {
        config_hash: cfg.hash12(),
        seed: cfg.seed,
        seeds,
        config: cfg.clone(),
        summary: summarize(&per_seed),
        per_seed,
        flops: flop_table(&flop_dims(cfg)),
    })
}

/// Plain-text rendering of the headline tables.
pub fn render_summary(report: &RunReport) -> String {
    let s = &report.summary;
    let mut out = String::new();
    out.push_str(&format!(
        "config_hash={} seeds={:?}\n",
        report.config_hash, report.seeds
    ));
    for v in &s.variants {
        out.push_str(&format!(
            "auc.{}={:.4} (seeds={})\n",
            v.variant.name(),
            v.mean_auc,
            v.seeds
        ));
    }
    out.push_str(&format!("gain.mean={:+.4}\n", s.mean_gain));
    for (i, g) in s.bucket_gain.iter().enumerate() {
        match g {
            Some(g) => out.push_str(&format!("gain.S{}={:+.4}\n", i + 1, g)),
            None => out.push_str(&format!("gain.S{}=n/a\n", i + 1)),
        }
    }
    out.push_str(&format!(
        "alignment.positive={:.4} alignment.random={:.4}\n",
        s.alignment.positive, s.alignment.random
    ));
    if !s.ablation_table.is_empty() {
        let width = s.ablation_table.iter().map(|r| r.name.len()).max().unwrap_or(0);
        out.push_str(&format!("{:<width$}  {:>8}  {:>8}\n", "ablation", "auc", "gain"));
        for r in &s.ablation_table {
            out.push_str(&format!(
                "{:<width$}  {:>8.4}  {:>+8.4}\n",
                r.name, r.mean_auc, r.mean_gain
            ));
        }
    }
    out
}
