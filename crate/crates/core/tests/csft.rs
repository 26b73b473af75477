use mim_core::csft::{evaluate_alignment, pool_gather, train_csft, NegSamplingConfig, NegativePool, PooledBatch};
use mim_core::encoders::{pretrain_dma, DmaConfig, EncoderConfig, EncoderHead, MMEmbeddingBundle};
use mim_core::numerics::{Optimizer, Tensor};
use mim_core::pipeline::{seed_triplets, PipelineConfig, SeedData};
use mim_core::synthdata::{World, WorldConfig};

fn bundle(key: u64) -> MMEmbeddingBundle {
    let t = Tensor::vector(vec![key as f64 + 1.0, 1.0]).unwrap();
    MMEmbeddingBundle {
        item_key: key,
        h_mm: t.clone(),
        h_img: t.clone(),
        h_txt: t,
    }
}

/// Keys of every gathered candidate for global anchor `g`, sorted.
fn candidates(pool: &NegativePool, n: usize, g: usize) -> Vec<u64> {
    let mut keys: Vec<u64> = pool_gather(pool, g / n, g % n)
        .unwrap()
        .into_iter()
        .map(|r| pool.get(r).unwrap().item_key)
        .collect();
    keys.sort_unstable();
    keys
}

#[test]
fn worker_split_does_not_change_the_candidate_multiset() {
    // The same global batch of 4, sharded as 2×2 or 1×4, over several steps.
    let split = NegSamplingConfig {
        batch_size: 2,
        k: 2,
        workers: 2,
        tau: 1.0,
        hard_negatives: true,
    };
    let whole = NegSamplingConfig {
        batch_size: 4,
        workers: 1,
        ..split.clone()
    };
    let mut a = NegativePool::new(&split);
    let mut b = NegativePool::new(&whole);
    for step in 0..5u64 {
        let pos: Vec<u64> = (0..4).map(|i| step * 100 + i).collect();
        let neg: Vec<u64> = (0..4).map(|i| step * 100 + 50 + i).collect();
        let batch = |r: std::ops::Range<usize>| PooledBatch {
            positives: pos[r.clone()].iter().map(|&k| bundle(k)).collect(),
            hard_negatives: neg[r].iter().map(|&k| bundle(k)).collect(),
        };
        a.push(0, batch(0..2)).unwrap();
        a.push(1, batch(2..4)).unwrap();
        b.push(0, batch(0..4)).unwrap();
        for (g, own) in pos.iter().enumerate().take(4) {
            let (x, y) = (candidates(&a, 2, g), candidates(&b, 4, g));
            assert_eq!(x, y, "step {step} anchor {g}");
            assert!(!x.contains(own));
        }
    }
}

#[test]
fn contrastive_tuning_separates_purchases_from_random_items() {
    let cfg = PipelineConfig {
        world: WorldConfig {
            n_items: 400,
            n_users: 100,
            n_ctr_samples: 1000,
            n_purchases: 1200,
            ..WorldConfig::default()
        },
        ..PipelineConfig::default()
    };
    let world = World::generate(&cfg.world_config(1)).unwrap();
    let data = SeedData::new(&cfg, &world, 1);
    let triplets = seed_triplets(&cfg, &data, 1);
    let mut head = EncoderHead::new(&EncoderConfig::default());
    pretrain_dma(&mut head, &data.source.item_list, &DmaConfig::default()).unwrap();
    let keys = data.source.item_keys();
    let before = evaluate_alignment(&head, &triplets, &keys, &data.source, 3).unwrap();
    let mut csft = cfg.csft_config(1);
    csft.optimizer = Optimizer::adam(0.005);
    let out = train_csft(head, &triplets, &data.source, &csft).unwrap();
    let after = evaluate_alignment(&out.head, &triplets, &keys, &data.source, 3).unwrap();
    assert!(after.margin() >= 0.1, "{after:?}");
    assert!(after.margin() > before.margin());
    assert_eq!(out.final_negatives, 2 * 8 * 2 * 4 - 1);
}
