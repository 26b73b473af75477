//! Space-time negative pool: a ring of the last `k + 1` batches per worker.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::CsftError;
use crate::encoders::MMEmbeddingBundle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NegSamplingConfig {
    /// Triplets per worker per step (`N`).
    pub batch_size: usize,
    /// Past batches retained per worker (`k`).
    pub k: usize,
    /// Simulated workers (`P`).
    pub workers: usize,
    pub tau: f64,
    /// Whether same-category hard negatives enter the pool.
    pub hard_negatives: bool,
}

impl Default for NegSamplingConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            k: 3,
            workers: 2,
            tau: 1.0,
            hard_negatives: true,
        }
    }
}

impl NegSamplingConfig {
    pub fn validate(&self) -> Result<(), CsftError> {
        if self.batch_size == 0 {
            return Err(CsftError::InvalidConfig("batch size N must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(CsftError::InvalidConfig("worker count P must be at least 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(CsftError::BadTemperature(self.tau));
        }
        Ok(())
    }
}

/// Negatives gathered for one anchor at batch index `j` (0-based) with full batches.
pub fn expected_negatives(cfg: &NegSamplingConfig, j: usize) -> usize {
    let per_triplet = if cfg.hard_negatives { 2 } else { 1 };
    per_triplet * cfg.batch_size * cfg.workers * (j.min(cfg.k) + 1) - 1
}

/// Detached bundles from one worker's batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PooledBatch {
    pub positives: Vec<MMEmbeddingBundle>,
    pub hard_negatives: Vec<MMEmbeddingBundle>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Positive(usize),
    HardNegative(usize),
}

/// Address of a pooled bundle; `age` 0 is the worker's newest batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PoolRef {
    pub worker: usize,
    pub age: usize,
    pub slot: Slot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativePool {
    rings: Vec<VecDeque<PooledBatch>>,
    capacity: usize,
    hard_negatives: bool,
}

impl NegativePool {
    pub fn new(cfg: &NegSamplingConfig) -> Self {
        Self {
            rings: vec![VecDeque::with_capacity(cfg.k + 1); cfg.workers],
            capacity: cfg.k + 1,
            hard_negatives: cfg.hard_negatives,
        }
    }

    pub fn workers(&self) -> usize {
        self.rings.len()
    }

    /// Appends a worker's newest batch, evicting the oldest beyond `k + 1`.
    pub fn push(&mut self, worker: usize, batch: PooledBatch) -> Result<(), CsftError> {
        let workers = self.rings.len();
        let ring = self
            .rings
            .get_mut(worker)
            .ok_or(CsftError::WorkerOutOfRange { index: worker, workers })?;
        if ring.len() == self.capacity {
            ring.pop_front();
        }
        ring.push_back(batch);
        Ok(())
    }

    /// Batches currently held for a worker.
    pub fn held(&self, worker: usize) -> usize {
        self.rings.get(worker).map_or(0, VecDeque::len)
    }

    pub fn get(&self, r: PoolRef) -> Option<&MMEmbeddingBundle> {
        let ring = self.rings.get(r.worker)?;
        let batch = ring.get(ring.len().checked_sub(r.age + 1)?)?;
        match r.slot {
            Slot::Positive(i) => batch.positives.get(i),
            Slot::HardNegative(i) if self.hard_negatives => batch.hard_negatives.get(i),
            Slot::HardNegative(_) => None,
        }
    }

    /// Every pooled entry: worker-major, oldest batch first, positives before
    /// hard negatives.
    pub fn entries(&self) -> Vec<PoolRef> {
        let mut out = Vec::new();
        for (worker, ring) in self.rings.iter().enumerate() {
            for (idx, batch) in ring.iter().enumerate() {
                let age = ring.len() - 1 - idx;
                out.extend((0..batch.positives.len()).map(|i| PoolRef {
                    worker,
                    age,
                    slot: Slot::Positive(i),
                }));
                if self.hard_negatives {
                    out.extend((0..batch.hard_negatives.len()).map(|i| PoolRef {
                        worker,
                        age,
                        slot: Slot::HardNegative(i),
                    }));
                }
            }
        }
        out
    }
}

/// Negatives for anchor `anchor` of worker `worker`'s newest batch: every
/// pooled entry except that anchor's own positive.
pub fn pool_gather(pool: &NegativePool, worker: usize, anchor: usize) -> Result<Vec<PoolRef>, CsftError> {
    let ring = pool.rings.get(worker).ok_or(CsftError::WorkerOutOfRange {
        index: worker,
        workers: pool.workers(),
    })?;
    let current = ring.back().ok_or(CsftError::ColdPool(worker))?;
    if anchor >= current.positives.len() {
        return Err(CsftError::AnchorOutOfRange {
            index: anchor,
            len: current.positives.len(),
        });
    }
    let own = PoolRef {
        worker,
        age: 0,
        slot: Slot::Positive(anchor),
    };
    Ok(pool.entries().into_iter().filter(|&r| r != own).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn bundle(key: u64) -> MMEmbeddingBundle {
        let t = Tensor::vector(vec![key as f64 + 1.0]).unwrap();
        MMEmbeddingBundle {
            item_key: key,
            h_mm: t.clone(),
            h_img: t.clone(),
            h_txt: t,
        }
    }

    fn batch(n: usize, base: u64) -> PooledBatch {
        PooledBatch {
            positives: (0..n as u64).map(|i| bundle(base + 2 * i)).collect(),
            hard_negatives: (0..n as u64).map(|i| bundle(base + 2 * i + 1)).collect(),
        }
    }

    fn warm(cfg: &NegSamplingConfig, steps: usize) -> NegativePool {
        let mut pool = NegativePool::new(cfg);
        for j in 0..steps {
            for w in 0..cfg.workers {
                pool.push(w, batch(cfg.batch_size, (j * 1000 + w * 100) as u64))
                    .unwrap();
            }
        }
        pool
    }

    #[test]
    fn reference_instances() {
        let cases = [(1024, 10, 1, 11, 22527), (2, 1, 3, 2, 23), (2, 1, 1, 1, 3)];
        for (n, k, p, steps, expect) in cases {
            let cfg = NegSamplingConfig {
                batch_size: n,
                k,
                workers: p,
                ..NegSamplingConfig::default()
            };
            let pool = warm(&cfg, steps);
            assert_eq!(pool_gather(&pool, 0, 0).unwrap().len(), expect);
        }
    }

    #[test]
    fn ring_holds_at_most_k_plus_one() {
        let cfg = NegSamplingConfig {
            k: 2,
            workers: 1,
            ..NegSamplingConfig::default()
        };
        for j in 1..6 {
            assert_eq!(warm(&cfg, j).held(0), j.min(3));
        }
    }

    #[test]
    fn excludes_only_own_positive() {
        let cfg = NegSamplingConfig {
            batch_size: 2,
            k: 0,
            workers: 1,
            ..NegSamplingConfig::default()
        };
        let pool = warm(&cfg, 1);
        let keys: Vec<u64> = pool_gather(&pool, 0, 1)
            .unwrap()
            .into_iter()
            .map(|r| pool.get(r).unwrap().item_key)
            .collect();
        assert_eq!(keys, vec![0, 1, 3]);
    }

    #[test]
    fn without_hard_negatives_count_halves() {
        let cfg = NegSamplingConfig {
            batch_size: 4,
            k: 1,
            workers: 2,
            hard_negatives: false,
            ..NegSamplingConfig::default()
        };
        let pool = warm(&cfg, 3);
        assert_eq!(pool_gather(&pool, 1, 3).unwrap().len(), expected_negatives(&cfg, 2));
        assert_eq!(expected_negatives(&cfg, 2), 4 * 2 * 2 - 1);
    }

    #[test]
    fn errors() {
        let cfg = NegSamplingConfig::default();
        let pool = NegativePool::new(&cfg);
        assert_eq!(pool_gather(&pool, 0, 0), Err(CsftError::ColdPool(0)));
        let pool = warm(&cfg, 1);
        assert!(matches!(
            pool_gather(&pool, 0, 8),
            Err(CsftError::AnchorOutOfRange { .. })
        ));
        assert!(matches!(
            pool_gather(&pool, 5, 0),
            Err(CsftError::WorkerOutOfRange { .. })
        ));
    }
}
