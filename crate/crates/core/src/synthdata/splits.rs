//! Train/test split and recency buckets for cold-start evaluation.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{mix64, LatentItem};
use crate::ciubm::BehaviorSample;

/// Items bucketed by descending birth time: `buckets[0]` is S1 (newest).
#[derive(Debug, Clone, PartialEq)]
pub struct ColdStartSplit {
    pub buckets: Vec<Vec<u64>>,
    bucket_of: HashMap<u64, usize>,
}

impl ColdStartSplit {
    /// Zero-based bucket index of an item (0 is S1).
    pub fn bucket_of(&self, key: u64) -> Option<usize> {
        self.bucket_of.get(&key).copied()
    }

    pub fn newest(&self) -> &[u64] {
        self.buckets.first().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }
}

/// Splits items into `n_buckets` near-equal groups by descending birth time;
/// earlier buckets take the remainder. Ties break by key.
pub fn split_cold_start(items: &[LatentItem], n_buckets: usize) -> ColdStartSplit {
    let n_buckets = n_buckets.max(1);
    let mut order: Vec<&LatentItem> = items.iter().collect();
    order.sort_by(|a, b| b.birth_time.total_cmp(&a.birth_time).then(a.key.cmp(&b.key)));
    let base = order.len() / n_buckets;
    let extra = order.len() % n_buckets;
    let mut buckets = Vec::with_capacity(n_buckets);
    let mut bucket_of = HashMap::new();
    let mut rest = order.as_slice();
    for b in 0..n_buckets {
        let take = base + usize::from(b < extra);
        let (head, tail) = rest.split_at(take);
        for it in head {
            bucket_of.insert(it.key, b);
        }
        buckets.push(head.iter().map(|it| it.key).collect());
        rest = tail;
    }
    ColdStartSplit { buckets, bucket_of }
}

/// Random train/test split of sample indices, then drops training samples
/// whose target is in S1. Returns `(train, test, dropped)`.
pub fn train_test_split(
    samples: &[BehaviorSample],
    test_fraction: f64,
    seed: u64,
    split: &ColdStartSplit,
) -> (Vec<usize>, Vec<usize>, usize) {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix64(seed ^ 0x5EED)));
    let n_test = (samples.len() as f64 * test_fraction).round() as usize;
    let mut test = order[..n_test].to_vec();
    test.sort_unstable();
    let newest: HashSet<u64> = split.newest().iter().copied().collect();
    let mut train: Vec<usize> = order[n_test..].to_vec();
    train.sort_unstable();
    let before = train.len();
    train.retain(|&i| !newest.contains(&samples[i].target_key));
    let dropped = before - train.len();
    (train, test, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{World, WorldConfig};

    fn items(n: usize) -> Vec<LatentItem> {
        (0..n)
            .map(|i| LatentItem {
                key: i as u64,
                category: 0,
                z: vec![1.0],
                birth_time: ((i * 37) % n) as f64 / n as f64,
                popularity: 0.0,
            })
            .collect()
    }

    #[test]
    fn ten_items_one_per_bucket() {
        let s = split_cold_start(&items(10), 10);
        assert!(s.buckets.iter().all(|b| b.len() == 1));
    }

    #[test]
    fn buckets_are_monotone_in_birth_time() {
        let its = items(103);
        let s = split_cold_start(&its, 10);
        let birth = |k: u64| its[k as usize].birth_time;
        for w in s.buckets.windows(2) {
            let oldest_newer = w[0].iter().map(|&k| birth(k)).fold(f64::INFINITY, f64::min);
            let newest_older = w[1].iter().map(|&k| birth(k)).fold(f64::NEG_INFINITY, f64::max);
            assert!(oldest_newer >= newest_older);
        }
        assert_eq!(s.buckets.iter().map(Vec::len).sum::<usize>(), 103);
        assert_eq!(
            s.bucket_of(
                its.iter()
                    .max_by(|a, b| a.birth_time.total_cmp(&b.birth_time))
                    .unwrap()
                    .key
            ),
            Some(0)
        );
    }

    #[test]
    fn newest_bucket_never_in_training_targets() {
        let cfg = WorldConfig {
            n_items: 300,
            n_users: 200,
            n_ctr_samples: 3000,
            n_purchases: 10,
            ..WorldConfig::default()
        };
        let world = World::generate(&cfg).unwrap();
        let split = split_cold_start(&world.catalog.items, 10);
        let (train, test, dropped) = train_test_split(&world.ctr.samples, 0.2, 1, &split);
        assert!(dropped > 0);
        let newest: HashSet<u64> = split.newest().iter().copied().collect();
        assert!(train
            .iter()
            .all(|&i| !newest.contains(&world.ctr.samples[i].target_key)));
        assert!(test.iter().any(|&i| newest.contains(&world.ctr.samples[i].target_key)));
        assert_eq!(train.len() + test.len() + dropped, world.ctr.samples.len());
    }
}
