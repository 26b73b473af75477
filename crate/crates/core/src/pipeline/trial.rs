//! One seed of the experiment: world → alignment → C-SFT → store → CTR models.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, Signal};
use super::source::WorldSource;
use super::PipelineError;
use crate::ciubm::{auc, predict, train_resolved, BehaviorSample, CtrModel, CtrVariant, ResolvedSample};
use crate::csft::{build_triplets, evaluate_alignment, train_csft, AlignmentStats, InterestTriplet};
use crate::encoders::{mix64, pretrain_dma, EncoderHead, Fusion};
use crate::repcenter::{precompute_table, EmbeddingStore};
use crate::synthdata::{split_cold_start, train_test_split, ColdStartSplit, World};

/// Triplets scored by the alignment probe.
const ALIGNMENT_PROBE: usize = 500;

/// Encoder-side ablations; each produces its own embedding store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderAblation {
    Full,
    /// Concatenation + MLP in place of the outer-product fusion.
    NoTfn,
    /// Plain in-batch negatives: one worker, batch `N·P`, no history, no hard negatives.
    NoStNsg,
    /// Only the multi-modal level of the loss.
    NoMultiLevel,
    /// Alignment pretraining only.
    NoCsft,
}

impl EncoderAblation {
    pub fn label(self) -> &'static str {
        match self {
            EncoderAblation::Full => "full",
            EncoderAblation::NoTfn => "w/o TFN",
            EncoderAblation::NoStNsg => "w/o ST-NSG",
            EncoderAblation::NoMultiLevel => "w/o multi-level",
            EncoderAblation::NoCsft => "w/o C-SFT",
        }
    }
}

/// Everything in the ablation table, in table order.
pub const ABLATIONS: [(&str, EncoderAblation, CtrVariant); 8] = [
    ("base+mim", EncoderAblation::Full, CtrVariant::Mim),
    ("w/o TFN", EncoderAblation::NoTfn, CtrVariant::Mim),
    ("w/o ST-NSG", EncoderAblation::NoStNsg, CtrVariant::Mim),
    ("w/o multi-level", EncoderAblation::NoMultiLevel, CtrVariant::Mim),
    ("w/o C-SFT", EncoderAblation::NoCsft, CtrVariant::Mim),
    ("w/o ID interest", EncoderAblation::Full, CtrVariant::MimNoId),
    ("w/o content interest", EncoderAblation::Full, CtrVariant::MimNoContent),
    ("w/o fusion interest", EncoderAblation::Full, CtrVariant::MimNoFusion),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderReport {
    pub ablation: EncoderAblation,
    pub dma_loss: Vec<f64>,
    /// Mean worker loss per C-SFT step; empty without C-SFT.
    pub csft_loss: Vec<f64>,
    pub final_negatives: usize,
    pub alignment: AlignmentStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtrReport {
    pub variant: CtrVariant,
    pub encoder: EncoderAblation,
    pub auc: f64,
    /// Held-out AUC per cold-start bucket, newest first; `None` for a single-class bucket.
    pub bucket_auc: Vec<Option<f64>>,
    pub category_auc: Vec<Option<f64>>,
    pub train_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub name: String,
    pub auc: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Training impressions removed because their target is in the newest bucket.
    pub dropped: usize,
    pub n_triplets: usize,
    pub test_click_rate: f64,
    pub encoders: Vec<EncoderReport>,
    pub ctr: Vec<CtrReport>,
    pub ablations: Vec<AblationEntry>,
}

impl SeedReport {
    pub fn ctr_result(&self, variant: CtrVariant, encoder: EncoderAblation) -> Option<&CtrReport> {
        self.ctr.iter().find(|c| c.variant == variant && c.encoder == encoder)
    }
}

/// Split data of one seed.
pub struct SeedData<'a> {
    pub source: WorldSource<'a>,
    pub split: ColdStartSplit,
    pub train: Vec<BehaviorSample>,
    pub test: Vec<BehaviorSample>,
    pub dropped: usize,
    pub categories: HashMap<u64, usize>,
}

impl<'a> SeedData<'a> {
    pub fn new(cfg: &PipelineConfig, world: &'a World, seed: u64) -> Self {
        let split = split_cold_start(&world.catalog.items, cfg.eval.splits);
        let samples = &world.ctr.samples;
        let (train_idx, test_idx, dropped) = train_test_split(samples, world.config.test_fraction, seed, &split);
        let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
        Self {
            source: WorldSource::new(world),
            train: pick(&train_idx),
            test: pick(&test_idx),
            dropped,
            split,
            categories: world.catalog.items.iter().map(|it| (it.key, it.category)).collect(),
        }
    }
}

/// `(query, item)` positive pairs for the configured signal.
pub fn signal_pairs(cfg: &PipelineConfig, data: &SeedData, seed: u64) -> Vec<(u64, u64)> {
    let world = data.source.world;
    let purchases = || world.purchases.rows.iter().map(|r| (r.query_key, r.item_key));
    match cfg.csft.signal {
        Signal::Purchase => purchases().collect(),
        Signal::Click => data
            .train
            .iter()
            .filter(|s| s.label == 1)
            .map(|s| (s.query_key, s.target_key))
            .collect(),
        Signal::Category => {
            let mut members: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
            for it in &world.catalog.items {
                members.entry(it.category).or_default().push(it.key);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0xCA7));
            purchases()
                .map(|(q, item)| {
                    let pool = &members[&data.categories[&item]];
                    (q, pool[rng.random_range(0..pool.len())])
                })
                .collect()
        }
    }
}

pub fn seed_triplets(cfg: &PipelineConfig, data: &SeedData, seed: u64) -> Vec<InterestTriplet> {
    build_triplets(&signal_pairs(cfg, data, seed), &data.categories, mix64(seed ^ 0x791)).triplets
}

/// Alignment pretraining followed (unless ablated) by C-SFT.
pub fn train_encoder(
    cfg: &PipelineConfig,
    seed: u64,
    data: &SeedData,
    triplets: &[InterestTriplet],
    ablation: EncoderAblation,
) -> Result<(EncoderHead, EncoderReport), PipelineError> {
    let mut enc = cfg.encoder_config(seed);
    if ablation == EncoderAblation::NoTfn {
        enc.fusion = Fusion::Concat;
    }
    let mut head = EncoderHead::new(&enc);
    let dma_loss = pretrain_dma(&mut head, &data.source.item_list, &cfg.dma_config(seed))?;
    let mut csft_loss = Vec::new();
    let mut final_negatives = 0;
    if ablation != EncoderAblation::NoCsft {
        let mut csft = cfg.csft_config(seed);
        match ablation {
            EncoderAblation::NoStNsg => {
                let s = &mut csft.sampling;
                s.batch_size *= s.workers;
                s.workers = 1;
                s.k = 0;
                s.hard_negatives = false;
            }
            EncoderAblation::NoMultiLevel => {
                csft.weights.alpha = 0.0;
                csft.weights.beta = 0.0;
            }
            _ => {}
        }
        let outcome = train_csft(head, triplets, &data.source, &csft)?;
        head = outcome.head;
        csft_loss = outcome.trajectory;
        final_negatives = outcome.final_negatives;
    }
    let probe = &triplets[..triplets.len().min(ALIGNMENT_PROBE)];
    let alignment = evaluate_alignment(
        &head,
        probe,
        &data.source.item_keys(),
        &data.source,
        mix64(seed ^ 0xA11),
    )?;
    Ok((
        head,
        EncoderReport {
            ablation,
            dma_loss,
            csft_loss,
            final_negatives,
            alignment,
        },
    ))
}

pub fn build_store(data: &SeedData, head: &EncoderHead) -> Result<EmbeddingStore, PipelineError> {
    Ok(precompute_table(&data.source.item_list, head)?)
}

/// Training and test impressions with content features resolved against one store.
pub struct ResolvedSplit {
    pub train: Vec<ResolvedSample>,
    pub test: Vec<ResolvedSample>,
}

pub fn resolve_split(
    cfg: &PipelineConfig,
    seed: u64,
    data: &SeedData,
    store: &EmbeddingStore,
) -> Result<ResolvedSplit, PipelineError> {
    let probe = CtrModel::new(cfg.ctr_config(seed), CtrVariant::Base, store.dim(), cfg.world.d_img);
    Ok(ResolvedSplit {
        train: probe.resolve_all(&data.train, store, &data.source)?,
        test: probe.resolve_all(&data.test, store, &data.source)?,
    })
}

/// AUC that is `None` when only one class is present.
fn group_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    auc(scores, labels).ok()
}

pub fn train_and_score(
    cfg: &PipelineConfig,
    seed: u64,
    data: &SeedData,
    resolved: &ResolvedSplit,
    variant: CtrVariant,
    encoder: EncoderAblation,
) -> Result<(CtrModel, CtrReport), PipelineError> {
    let mut model = CtrModel::new(cfg.ctr_config(seed), variant, cfg.encoder.d_mm, cfg.world.d_img);
    let train_loss = train_resolved(&mut model, &resolved.train)?;
    let scores = predict(&model, &resolved.test)?;
    let labels: Vec<u8> = resolved.test.iter().map(|s| s.label).collect();
    let overall = auc(&scores, &labels)?;
    let grouped = |n: usize, group: &dyn Fn(u64) -> Option<usize>| -> Vec<Option<f64>> {
        let mut s = vec![Vec::new(); n];
        let mut l = vec![Vec::new(); n];
        for (r, (&score, &label)) in resolved.test.iter().zip(scores.iter().zip(&labels)) {
            if let Some(g) = group(r.target_key) {
                s[g].push(score);
                l[g].push(label);
            }
        }
        s.iter().zip(&l).map(|(s, l)| group_auc(s, l)).collect()
    };
    let bucket_auc = grouped(data.split.len(), &|k| data.split.bucket_of(k));
    let category_auc = grouped(cfg.world.n_categories, &|k| data.categories.get(&k).copied());
    Ok((
        model,
        CtrReport {
            variant,
            encoder,
            auc: overall,
            bucket_auc,
            category_auc,
            train_loss,
        },
    ))
}

/// Runs base and base+MIM, plus every ablation when asked.
pub fn run_seed(cfg: &PipelineConfig, seed: u64, ablations: bool) -> Result<SeedReport, PipelineError> {
    let world = World::generate(&cfg.world_config(seed))?;
    let data = SeedData::new(cfg, &world, seed);
    let triplets = seed_triplets(cfg, &data, seed);
    let encoder_runs: Vec<EncoderAblation> = if ablations {
        let mut v: Vec<EncoderAblation> = ABLATIONS.iter().map(|a| a.1).collect();
        v.dedup();
        v
    } else {
        vec![EncoderAblation::Full]
    };
    let mut encoders = Vec::new();
    let mut ctr = Vec::new();
    for &ablation in &encoder_runs {
        let (head, report) = train_encoder(cfg, seed, &data, &triplets, ablation)?;
        encoders.push(report);
        let store = build_store(&data, &head)?;
        let resolved = resolve_split(cfg, seed, &data, &store)?;
        let variants: Vec<CtrVariant> = if ablation == EncoderAblation::Full {
            let mut v = vec![CtrVariant::Base, CtrVariant::Mim];
            if ablations {
                v.extend([CtrVariant::MimNoId, CtrVariant::MimNoContent, CtrVariant::MimNoFusion]);
            }
            v
        } else {
            vec![CtrVariant::Mim]
        };
        for variant in variants {
            log::info!("seed {seed}: training {} on {} store", variant.name(), ablation.label());
            ctr.push(train_and_score(cfg, seed, &data, &resolved, variant, ablation)?.1);
        }
    }
    let base = ctr[0].auc;
    let ablation_entries = if ablations {
        ABLATIONS
            .iter()
            .map(|&(name, enc, variant)| {
                let r = ctr
                    .iter()
                    .find(|c| c.variant == variant && c.encoder == enc)
                    .expect("every ablation was trained");
                AblationEntry {
                    name: name.to_string(),
                    auc: r.auc,
                    gain: r.auc - base,
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    let clicks = data.test.iter().filter(|s| s.label == 1).count();
    Ok(SeedReport {
        seed,
        n_train: data.train.len(),
        n_test: data.test.len(),
        dropped: data.dropped,
        n_triplets: triplets.len(),
        test_click_rate: clicks as f64 / data.test.len().max(1) as f64,
        encoders,
        ctr,
        ablations: ablation_entries,
    })
}
