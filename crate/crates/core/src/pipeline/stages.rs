//! Disk-backed stages sharing one run directory.
//!
//! ```text
//! <out>/run-<hash12>-s<seed>/
//!   config.json        fully-resolved config
//!   purchases.tsv      query, item
//!   triplets.tsv       query, positive, hard negative
//!   ctr_train.tsv      impressions used for training
//!   ctr_test.tsv       held-out impressions
//!   dma_head.bin       encoder after image-text alignment
//!   csft_head.bin      encoder after contrastive fine-tuning
//!   store.mimt         precomputed multi-modal embedding table
//!   metrics-<variant>.txt  key=value metrics of one CTR variant
//!   flops.json
//!   report.json        stage sections, filled in as stages run
//! ```
//!
//! Every stage regenerates the world from the config (it is a pure function
//! of it) and reads its upstream artifacts from the directory.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::report::{flop_dims, run_eval, RunReport};
use super::trial::{build_store, resolve_split, seed_triplets, train_and_score, CtrReport, EncoderAblation, SeedData};
use super::PipelineError;
use crate::ciubm::{read_dataset, write_dataset, BehaviorSample, CtrVariant};
use crate::csft::{evaluate_alignment, read_triplets, train_csft, write_triplets, AlignmentStats, InterestTriplet};
use crate::encoders::{mix64, pretrain_dma, EncoderHead};
use crate::repcenter::{flop_table, EmbeddingStore, FlopLedger};
use crate::synthdata::World;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub n_items: usize,
    pub n_users: usize,
    pub n_purchases: usize,
    pub n_triplets: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsftSectionReport {
    pub trajectory: Vec<f64>,
    pub final_negatives: usize,
    pub alignment_before: AlignmentStats,
    pub alignment_after: AlignmentStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreSection {
    pub entries: usize,
    pub dim: usize,
    pub version: u64,
}

/// Contents of `report.json`. Stages only add or replace their own section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDirReport {
    pub config_hash: String,
    pub seed: u64,
    pub data: Option<DataSection>,
    pub dma_loss: Option<Vec<f64>>,
    pub csft: Option<CsftSectionReport>,
    pub store: Option<StoreSection>,
    /// One entry per trained variant, in the order first trained.
    pub ctr: Vec<CtrReport>,
    pub flops: Option<Vec<FlopLedger>>,
    pub evaluation: Option<RunReport>,
}

/// A run directory bound to one config.
pub struct RunDir {
    pub cfg: PipelineConfig,
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `<out>/run-<hash12>-s<seed>/` and writes the resolved config.
    pub fn create(cfg: PipelineConfig, out: &Path) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let path = out.join(format!("run-{}-s{}", cfg.hash12(), cfg.seed));
        fs::create_dir_all(&path)?;
        let resolved = cfg.to_json();
        log::info!("resolved config:\n{resolved}");
        fs::write(path.join("config.json"), resolved + "\n")?;
        Ok(Self { cfg, path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn require(&self, name: &str) -> Result<PathBuf, PipelineError> {
        let p = self.file(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(PipelineError::MissingArtifact(format!(
                "{} (run the producing stage first)",
                p.display()
            )))
        }
    }

    pub fn report(&self) -> Result<RunDirReport, PipelineError> {
        let p = self.file("report.json");
        if !p.is_file() {
            return Ok(RunDirReport {
                config_hash: self.cfg.hash12(),
                seed: self.cfg.seed,
                data: None,
                dma_loss: None,
                csft: None,
                store: None,
                ctr: Vec::new(),
                flops: None,
                evaluation: None,
            });
        }
        serde_json::from_str(&fs::read_to_string(&p)?)
            .map_err(|e| PipelineError::Invariant(format!("unreadable {}: {e}", p.display())))
    }

    fn update(&self, f: impl FnOnce(&mut RunDirReport)) -> Result<(), PipelineError> {
        let mut r = self.report()?;
        f(&mut r);
        let mut text = serde_json::to_string_pretty(&r).expect("report serializes");
        text.push('\n');
        fs::write(self.file("report.json"), text)?;
        Ok(())
    }

    fn world(&self) -> Result<World, PipelineError> {
        Ok(World::generate(&self.cfg.world_config(self.cfg.seed))?)
    }

    fn load_head(&self, name: &str) -> Result<EncoderHead, PipelineError> {
        Ok(EncoderHead::from_bytes(&fs::read(self.require(name)?)?)?)
    }

    fn read_samples(&self, name: &str) -> Result<Vec<BehaviorSample>, PipelineError> {
        Ok(read_dataset(BufReader::new(File::open(self.require(name)?)?))?)
    }

    fn read_triplets(&self) -> Result<Vec<InterestTriplet>, PipelineError> {
        Ok(read_triplets(BufReader::new(File::open(
            self.require("triplets.tsv")?,
        )?))?)
    }

    /// Split data with the train/test sets read back from disk.
    fn seed_data<'a>(&self, world: &'a World) -> Result<SeedData<'a>, PipelineError> {
        let mut data = SeedData::new(&self.cfg, world, self.cfg.seed);
        data.train = self.read_samples("ctr_train.tsv")?;
        data.test = self.read_samples("ctr_test.tsv")?;
        Ok(data)
    }

    pub fn gen_data(&self) -> Result<DataSection, PipelineError> {
        let world = self.world()?;
        let data = SeedData::new(&self.cfg, &world, self.cfg.seed);
        let triplets = seed_triplets(&self.cfg, &data, self.cfg.seed);
        let mut out = BufWriter::new(File::create(self.file("purchases.tsv"))?);
        for r in &world.purchases.rows {
            writeln!(out, "{}\t{}", r.query_key, r.item_key)?;
        }
        out.flush()?;
        write_triplets(BufWriter::new(File::create(self.file("triplets.tsv"))?), &triplets)?;
        write_dataset(BufWriter::new(File::create(self.file("ctr_train.tsv"))?), &data.train)?;
        write_dataset(BufWriter::new(File::create(self.file("ctr_test.tsv"))?), &data.test)?;
        let section = DataSection {
            n_items: world.catalog.items.len(),
            n_users: world.users.len(),
            n_purchases: world.purchases.rows.len(),
            n_triplets: triplets.len(),
            n_train: data.train.len(),
            n_test: data.test.len(),
            dropped: data.dropped,
        };
        self.update(|r| r.data = Some(section.clone()))?;
        Ok(section)
    }

    pub fn pretrain_dma(&self) -> Result<Vec<f64>, PipelineError> {
        let world = self.world()?;
        let data = SeedData::new(&self.cfg, &world, self.cfg.seed);
        let mut head = EncoderHead::new(&self.cfg.encoder_config(self.cfg.seed));
        let loss = pretrain_dma(&mut head, &data.source.item_list, &self.cfg.dma_config(self.cfg.seed))?;
        fs::write(self.file("dma_head.bin"), head.to_bytes())?;
        self.update(|r| r.dma_loss = Some(loss.clone()))?;
        Ok(loss)
    }

    pub fn train_csft(&self) -> Result<CsftSectionReport, PipelineError> {
        let head = self.load_head("dma_head.bin")?;
        let triplets = self.read_triplets()?;
        let world = self.world()?;
        let data = SeedData::new(&self.cfg, &world, self.cfg.seed);
        let keys = data.source.item_keys();
        let probe = &triplets[..triplets.len().min(500)];
        let probe_seed = mix64(self.cfg.seed ^ 0xA11);
        let before = evaluate_alignment(&head, probe, &keys, &data.source, probe_seed)?;
        let outcome = train_csft(head, &triplets, &data.source, &self.cfg.csft_config(self.cfg.seed))?;
        let after = evaluate_alignment(&outcome.head, probe, &keys, &data.source, probe_seed)?;
        fs::write(self.file("csft_head.bin"), outcome.head.to_bytes())?;
        let section = CsftSectionReport {
            trajectory: outcome.trajectory,
            final_negatives: outcome.final_negatives,
            alignment_before: before,
            alignment_after: after,
        };
        self.update(|r| r.csft = Some(section.clone()))?;
        Ok(section)
    }

    pub fn build_repcenter(&self) -> Result<StoreSection, PipelineError> {
        let head = self.load_head("csft_head.bin")?;
        let world = self.world()?;
        let data = SeedData::new(&self.cfg, &world, self.cfg.seed);
        let store = build_store(&data, &head)?;
        store.save(&self.file("store.mimt"))?;
        let section = StoreSection {
            entries: store.len(),
            dim: store.dim(),
            version: store.version(),
        };
        self.update(|r| r.store = Some(section.clone()))?;
        Ok(section)
    }

    pub fn load_store(&self) -> Result<EmbeddingStore, PipelineError> {
        Ok(EmbeddingStore::load(&self.require("store.mimt")?)?)
    }

    /// Trains and scores one variant; writes `metrics-<variant>.txt`.
    pub fn train_ctr(&self, variant: CtrVariant) -> Result<CtrReport, PipelineError> {
        let store = self.load_store()?;
        let world = self.world()?;
        let data = self.seed_data(&world)?;
        let resolved = resolve_split(&self.cfg, self.cfg.seed, &data, &store)?;
        let (_, report) = train_and_score(
            &self.cfg,
            self.cfg.seed,
            &data,
            &resolved,
            variant,
            EncoderAblation::Full,
        )?;
        fs::write(
            self.file(&format!("metrics-{}.txt", variant.name())),
            metrics_text(&report),
        )?;
        self.update(|r| match r.ctr.iter_mut().find(|c| c.variant == variant) {
            Some(slot) => *slot = report.clone(),
            None => r.ctr.push(report.clone()),
        })?;
        Ok(report)
    }

    pub fn flops(&self) -> Result<Vec<FlopLedger>, PipelineError> {
        let table = flop_table(&flop_dims(&self.cfg));
        let mut text = serde_json::to_string_pretty(&table).expect("flops serialize");
        text.push('\n');
        fs::write(self.file("flops.json"), text)?;
        self.update(|r| r.flops = Some(table.clone()))?;
        Ok(table)
    }

    pub fn eval(&self) -> Result<RunReport, PipelineError> {
        let report = run_eval(&self.cfg)?;
        self.update(|r| r.evaluation = Some(report.clone()))?;
        Ok(report)
    }

    /// Every stage in order, then the multi-seed evaluation.
    pub fn pipeline(&self) -> Result<RunDirReport, PipelineError> {
        self.gen_data()?;
        self.pretrain_dma()?;
        self.train_csft()?;
        self.build_repcenter()?;
        self.train_ctr(CtrVariant::Base)?;
        self.train_ctr(CtrVariant::Mim)?;
        self.flops()?;
        self.eval()?;
        self.report()
    }
}

/// `key=value` lines for one CTR variant.
pub fn metrics_text(r: &CtrReport) -> String {
    let mut out = format!("variant={}\nauc={}\n", r.variant.name(), r.auc);
    let fmt = |x: &Option<f64>| x.map_or_else(|| "nan".to_string(), |v| v.to_string());
    for (i, a) in r.bucket_auc.iter().enumerate() {
        out.push_str(&format!("auc.S{}={}\n", i + 1, fmt(a)));
    }
    for (i, a) in r.category_auc.iter().enumerate() {
        out.push_str(&format!("auc.category{}={}\n", i, fmt(a)));
    }
    for (i, l) in r.train_loss.iter().enumerate() {
        out.push_str(&format!("train_loss.epoch{}={}\n", i + 1, l));
    }
    out
}
