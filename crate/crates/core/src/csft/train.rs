//! Synchronous multi-worker training loop.
//!
//! Per step every worker encodes its shard, detached copies of all shards
//! enter the pool in worker order, each worker then records its loss against
//! the pool and backpropagates, and the worker gradients are summed in worker
//! order and applied once.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::worker_loss_var;
use super::{CsftError, CsftLossWeights, InterestTriplet, LossVariant, NegSamplingConfig, NegativePool, PooledBatch};
use crate::encoders::{EncoderError, EncoderHead, ItemFeatures};
use crate::numerics::{Optimizer, ParamState, Tape, Tensor};

/// Backbone features for items and queries.
pub trait FeatureSource: Sync {
    fn item_features(&self, key: u64) -> Option<ItemFeatures>;
    fn query_feature(&self, key: u64) -> Option<Tensor>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsftConfig {
    pub sampling: NegSamplingConfig,
    pub weights: CsftLossWeights,
    pub loss_variant: LossVariant,
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for CsftConfig {
    fn default() -> Self {
        Self {
            sampling: NegSamplingConfig::default(),
            weights: CsftLossWeights::default(),
            loss_variant: LossVariant::Standard,
            optimizer: Optimizer::sgd(0.005),
            epochs: 1,
            seed: 7,
        }
    }
}

/// One worker's shard of a step: raw features for queries and both items.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub queries: Vec<Tensor>,
    pub positives: Vec<ItemFeatures>,
    pub hard_negatives: Vec<ItemFeatures>,
}

#[derive(Debug, Clone)]
pub struct CsftOutcome {
    pub head: EncoderHead,
    /// Mean worker loss at every step.
    pub trajectory: Vec<f64>,
    /// Negatives each anchor saw at the final step.
    pub final_negatives: usize,
}

struct Features {
    items: HashMap<u64, ItemFeatures>,
    queries: HashMap<u64, Tensor>,
}

impl Features {
    fn collect(source: &dyn FeatureSource, triplets: &[InterestTriplet]) -> Result<Self, CsftError> {
        let mut items = HashMap::new();
        let mut queries = HashMap::new();
        for t in triplets {
            for key in [t.pos_item_key, t.hard_neg_key] {
                if let std::collections::hash_map::Entry::Vacant(e) = items.entry(key) {
                    e.insert(source.item_features(key).ok_or(CsftError::MissingFeature(key))?);
                }
            }
            if let std::collections::hash_map::Entry::Vacant(e) = queries.entry(t.query_key) {
                e.insert(
                    source
                        .query_feature(t.query_key)
                        .ok_or(CsftError::MissingFeature(t.query_key))?,
                );
            }
        }
        Ok(Self { items, queries })
    }

    fn batch(&self, triplets: &[InterestTriplet]) -> TrainingBatch {
        TrainingBatch {
            queries: triplets.iter().map(|t| self.queries[&t.query_key].clone()).collect(),
            positives: triplets.iter().map(|t| self.items[&t.pos_item_key].clone()).collect(),
            hard_negatives: triplets.iter().map(|t| self.items[&t.hard_neg_key].clone()).collect(),
        }
    }
}

fn check_head(head: &EncoderHead) -> Result<(), CsftError> {
    head.validate()?;
    if head.d_align_img() != head.d_mm() || head.d_align_txt() != head.d_align_img() {
        return Err(CsftError::Encoder(EncoderError::DimMismatch {
            what: "query embedding vs multi-modal embedding",
            expected: head.d_mm(),
            got: head.d_align_img(),
        }));
    }
    Ok(())
}

/// Trains the encoder head; every step consumes `N · P` triplets, wrapping
/// around the shuffled epoch order to keep batches full.
pub fn train_csft(
    head: EncoderHead,
    triplets: &[InterestTriplet],
    source: &dyn FeatureSource,
    cfg: &CsftConfig,
) -> Result<CsftOutcome, CsftError> {
    if triplets.is_empty() {
        return Err(CsftError::EmptyTriplets);
    }
    cfg.sampling.validate()?;
    check_head(&head)?;
    let features = Features::collect(source, triplets)?;
    let (n, p) = (cfg.sampling.batch_size, cfg.sampling.workers);
    let global = n * p;
    let steps_per_epoch = triplets.len().div_ceil(global);
    let mut head = head;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut pool = NegativePool::new(&cfg.sampling);
    let mut states: Vec<ParamState> = Vec::new();
    let mut trajectory = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut final_negatives = 0;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for step in 0..steps_per_epoch {
            let picked: Vec<InterestTriplet> = (0..global)
                .map(|i| triplets[order[(step * global + i) % order.len()]])
                .collect();
            let shards: Vec<TrainingBatch> = picked.chunks(n).map(|c| features.batch(c)).collect();

            let detached: Vec<PooledBatch> = shards
                .par_iter()
                .map(|b| encode_detached(&head, b))
                .collect::<Result<_, _>>()?;
            for (w, batch) in detached.into_iter().enumerate() {
                pool.push(w, batch)?;
            }
            final_negatives = super::pool_gather(&pool, 0, 0)?.len();

            let results: Vec<(f64, Vec<Tensor>)> = shards
                .par_iter()
                .enumerate()
                .map(|(w, batch)| {
                    let mut tape = Tape::new();
                    let vars = head.bind(&mut tape);
                    let loss = worker_loss_var(
                        &mut tape,
                        &vars,
                        batch,
                        &pool,
                        w,
                        cfg.weights,
                        &cfg.sampling,
                        cfg.loss_variant,
                    )?;
                    let g = tape.backward(loss, &Tensor::from_parts(Vec::new(), vec![1.0]))?;
                    let grads = vars.all().into_iter().map(|v| g.wrt(&tape, v)).collect();
                    Ok((tape.value(loss).item(), grads))
                })
                .collect::<Result<_, CsftError>>()?;

            let mut sum: Vec<Vec<f64>> = head.params().iter().map(|t| vec![0.0; t.len()]).collect();
            let mut loss = 0.0;
            for (l, grads) in &results {
                loss += l;
                for (acc, g) in sum.iter_mut().zip(grads) {
                    acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
            }
            let scale = 1.0 / p as f64;
            let grads: Vec<Tensor> = head
                .params()
                .iter()
                .zip(sum)
                .map(|(t, g)| Tensor::from_parts(t.shape().to_vec(), g.into_iter().map(|x| x * scale).collect()))
                .collect();
            cfg.optimizer.apply_all(head.params_mut(), &grads, &mut states);
            trajectory.push(loss * scale);
        }
    }
    Ok(CsftOutcome {
        head,
        trajectory,
        final_negatives,
    })
}

fn encode_detached(head: &EncoderHead, batch: &TrainingBatch) -> Result<PooledBatch, CsftError> {
    let enc = |items: &[ItemFeatures]| items.iter().map(|f| head.encode_item(f)).collect::<Result<Vec<_>, _>>();
    Ok(PooledBatch {
        positives: enc(&batch.positives)?,
        hard_negatives: enc(&batch.hard_negatives)?,
    })
}

/// Mean query/positive cosine versus query/random-item cosine in the shared space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub positive: f64,
    pub random: f64,
}

impl AlignmentStats {
    pub fn margin(&self) -> f64 {
        self.positive - self.random
    }
}

pub fn evaluate_alignment(
    head: &EncoderHead,
    triplets: &[InterestTriplet],
    candidates: &[u64],
    source: &dyn FeatureSource,
    seed: u64,
) -> Result<AlignmentStats, CsftError> {
    if triplets.is_empty() || candidates.is_empty() {
        return Err(CsftError::EmptyTriplets);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos = 0.0;
    let mut rand = 0.0;
    let encode = |key: u64| -> Result<Tensor, CsftError> {
        let f = source.item_features(key).ok_or(CsftError::MissingFeature(key))?;
        Ok(head.encode_item(&f)?.h_mm)
    };
    for t in triplets {
        let qf = source
            .query_feature(t.query_key)
            .ok_or(CsftError::MissingFeature(t.query_key))?;
        let q = head.encode_query(&qf)?;
        pos += cos(&q, &encode(t.pos_item_key)?);
        rand += cos(&q, &encode(candidates[rng.random_range(0..candidates.len())])?);
    }
    let n = triplets.len() as f64;
    Ok(AlignmentStats {
        positive: pos / n,
        random: rand / n,
    })
}

fn cos(a: &Tensor, b: &Tensor) -> f64 {
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let d = a.norm() * b.norm();
    if d == 0.0 {
        0.0
    } else {
        dot / d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;

    struct Toy;

    impl FeatureSource for Toy {
        fn item_features(&self, key: u64) -> Option<ItemFeatures> {
            let x = key as f64;
            Some(ItemFeatures {
                key,
                image: Tensor::vector(vec![x.sin(), x.cos(), 0.5]).ok()?,
                text: Tensor::vector(vec![x.cos(), 1.0, -x.sin()]).ok()?,
            })
        }

        fn query_feature(&self, key: u64) -> Option<Tensor> {
            let x = (key - 1000) as f64;
            Tensor::vector(vec![x.sin(), x.cos(), 0.4]).ok()
        }
    }

    fn head() -> EncoderHead {
        EncoderHead::new(&EncoderConfig {
            d_img: 3,
            d_txt: 3,
            d_align: 2,
            d_mm: 2,
            hidden: vec![4],
            ..EncoderConfig::default()
        })
    }

    fn triplets(n: u64) -> Vec<InterestTriplet> {
        (0..n)
            .map(|i| InterestTriplet {
                query_key: 1000 + i,
                pos_item_key: i,
                hard_neg_key: i + 50,
            })
            .collect()
    }

    #[test]
    fn one_triplet_ten_steps() {
        let cfg = CsftConfig {
            sampling: NegSamplingConfig {
                batch_size: 1,
                workers: 1,
                k: 2,
                ..NegSamplingConfig::default()
            },
            epochs: 10,
            ..CsftConfig::default()
        };
        let out = train_csft(head(), &triplets(1), &Toy, &cfg).unwrap();
        assert_eq!(out.trajectory.len(), 10);
        assert_eq!(out.final_negatives, 2 * 3 - 1);
    }

    #[test]
    fn deterministic_trajectory() {
        let cfg = CsftConfig {
            epochs: 2,
            optimizer: Optimizer::adam(0.01),
            ..CsftConfig::default()
        };
        let a = train_csft(head(), &triplets(20), &Toy, &cfg).unwrap();
        let b = train_csft(head(), &triplets(20), &Toy, &cfg).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.head, b.head);
    }

    #[test]
    fn rejects_empty_and_mismatched_head() {
        assert_eq!(
            train_csft(head(), &[], &Toy, &CsftConfig::default()).unwrap_err(),
            CsftError::EmptyTriplets
        );
        let wide = EncoderHead::new(&EncoderConfig {
            d_img: 3,
            d_txt: 3,
            d_align: 2,
            d_mm: 3,
            hidden: vec![4],
            ..EncoderConfig::default()
        });
        assert!(train_csft(wide, &triplets(2), &Toy, &CsftConfig::default()).is_err());
    }
}
