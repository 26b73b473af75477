use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;

use mim_core::ciubm::{content_interest, fusion_interest, id_interest};
use mim_core::csft::{infonce, LossVariant};
use mim_core::encoders::{dma_align_step, tfn_fuse, EncoderConfig, EncoderHead, Fusion};
use mim_core::numerics::Tensor;
use mim_core::repcenter::{flop_table, EmbeddingStore, FlopDims};
use mim_core::synthdata::{World, WorldConfig};
use proptest::prelude::*;

fn nonzero_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, d).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn vector(v: &[f64]) -> Tensor {
    Tensor::vector(v.to_vec()).unwrap()
}

/// Target, behaviors and mask sharing one width.
fn pooling_case() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>, Vec<bool>)> {
    (1usize..6, 0usize..8).prop_flat_map(|(d, l)| {
        (
            nonzero_vec(d),
            prop::collection::vec(nonzero_vec(d), l),
            prop::collection::vec(any::<bool>(), l),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tfn_recovers_both_inputs(a in prop::collection::vec(-1e3f64..1e3, 1..12), b in prop::collection::vec(-1e3f64..1e3, 1..12)) {
        let z = tfn_fuse(&vector(&a), &vector(&b)).unwrap();
        let (d1, d2) = (a.len(), b.len());
        prop_assert_eq!(z.len(), (d1 + 1) * (d2 + 1));
        let z = z.data();
        let cols = d2 + 1;
        for (i, &ai) in a.iter().enumerate() {
            prop_assert_eq!(z[i * cols + d2], ai);
        }
        for (j, &bj) in b.iter().enumerate() {
            prop_assert_eq!(z[d1 * cols + j], bj);
        }
        prop_assert_eq!(z[d1 * cols + d2], 1.0);
    }

    #[test]
    fn standard_infonce_is_nonnegative(
        (anchor, pos, negs) in (1usize..6).prop_flat_map(|d| (nonzero_vec(d), nonzero_vec(d), prop::collection::vec(nonzero_vec(d), 0..6))),
        tau in 0.05f64..5.0,
    ) {
        let negs: Vec<Tensor> = negs.iter().map(|n| vector(n)).collect();
        let loss = infonce(&vector(&anchor), &vector(&pos), &negs, tau, LossVariant::Standard).unwrap();
        prop_assert!(loss >= 0.0, "loss {loss}");
    }

    #[test]
    fn more_uniform_negatives_raise_the_loss(k in 1usize..50, extra in 1usize..50, v in nonzero_vec(4)) {
        let loss = |n: usize| infonce(&vector(&v), &vector(&v), &vec![vector(&v); n], 1.0, LossVariant::Standard).unwrap();
        let (small, large) = (loss(k), loss(k + extra));
        prop_assert!((small - ((k + 1) as f64).ln()).abs() < 1e-9);
        prop_assert!((large - ((k + extra + 1) as f64).ln()).abs() < 1e-9);
        prop_assert!(large > small);
    }

    #[test]
    fn alpha_is_bounded_and_masked_slots_are_inert((target, rows, mask) in pooling_case()) {
        let t = vector(&target);
        let behaviors: Vec<Tensor> = rows.iter().map(|r| vector(r)).collect();
        let (alpha, pooled) = content_interest(&t, &behaviors, &mask).unwrap();
        for (i, &a) in alpha.data().iter().enumerate() {
            prop_assert!((-1.0..=1.0).contains(&a), "alpha {a}");
            if !mask[i] {
                prop_assert_eq!(a, 0.0);
            }
        }
        // Scrambling masked rows leaves every pooled vector unchanged.
        let scrambled: Vec<Tensor> = behaviors
            .iter()
            .zip(&mask)
            .map(|(b, &m)| if m { b.clone() } else { vector(&vec![7.5; target.len()]) })
            .collect();
        let (alpha2, pooled2) = content_interest(&t, &scrambled, &mask).unwrap();
        prop_assert_eq!(&alpha, &alpha2);
        prop_assert_eq!(&pooled, &pooled2);
        prop_assert_eq!(id_interest(&t, &behaviors, &mask).unwrap(), id_interest(&t, &scrambled, &mask).unwrap());
        prop_assert_eq!(
            fusion_interest(&alpha, &behaviors, &mask, target.len()).unwrap(),
            fusion_interest(&alpha, &scrambled, &mask, target.len()).unwrap()
        );
    }

    #[test]
    fn dma_loss_is_nonnegative(seed in 0u64..1000, n in 1usize..6) {
        let head = EncoderHead::new(&EncoderConfig { init_seed: seed, ..EncoderConfig::default() });
        let pairs: Vec<(Tensor, Tensor)> = (0..n)
            .map(|i| {
                let f = |off: f64, d: usize| vector(&(0..d).map(|j| ((seed as f64 + off + (i * d + j) as f64) * 0.37).sin()).collect::<Vec<_>>());
                (f(0.0, head.d_img()), f(0.5, head.d_txt()))
            })
            .collect();
        prop_assert!(dma_align_step(&head, &pairs, 0.1).unwrap().loss >= 0.0);
    }

    #[test]
    fn training_flops_are_strictly_ordered(fom in 1u64..1_000_000_000_000, l in 1usize..64, d in 1usize..64) {
        let dims = FlopDims {
            behaviors: l,
            d_id: d,
            d_mm: d,
            d_query: 32,
            deepctr_hidden: vec![64, 32],
            d_img: 32,
            d_txt: 32,
            d_align: d,
            encoder_hidden: vec![64],
            fusion: Fusion::Tfn,
            fom_cost: fom,
        };
        let t: Vec<u64> = flop_table(&dims).iter().map(|r| r.training.total()).collect();
        prop_assert!(t[0] < t[1] && t[1] < t[2] && t[2] < t[3], "{t:?}");
    }
}

#[test]
fn world_is_a_pure_function_of_its_config() {
    let cfg = WorldConfig {
        n_items: 150,
        n_users: 80,
        n_ctr_samples: 600,
        n_purchases: 100,
        seed: 12,
        ..WorldConfig::default()
    };
    let (a, b) = (World::generate(&cfg).unwrap(), World::generate(&cfg).unwrap());
    assert_eq!(a.ctr.samples, b.ctr.samples);
    assert_eq!(a.purchases, b.purchases);
    assert_eq!(a.catalog.all_item_features(), b.catalog.all_item_features());
}

#[test]
fn versions_increase_and_reads_are_never_torn() {
    let store = Arc::new(EmbeddingStore::new(16));
    store.apply_batch(vec![(1, vec![0.0; 16]), (2, vec![0.0; 16])]).unwrap();
    let done = Arc::new(AtomicBool::new(false));
    let readers: Vec<_> = (0..3)
        .map(|_| {
            let (store, done) = (store.clone(), done.clone());
            thread::spawn(move || {
                let mut last = 0;
                let mut reads = 0u64;
                while !done.load(Ordering::Relaxed) || reads < 100 {
                    let (version, entries) = store.lookup(&[1, 2], false).unwrap();
                    assert!(version >= last, "version went back");
                    last = version;
                    for e in &entries {
                        let v = e.vector.data();
                        assert!(v.iter().all(|&x| x == v[0]), "torn vector {v:?}");
                    }
                    reads += 1;
                }
            })
        })
        .collect();
    let mut prev = store.version();
    for step in 1..=500 {
        let fill = step as f32;
        let v = store
            .apply_batch(vec![(1, vec![fill; 16]), (2, vec![-fill; 16])])
            .unwrap();
        assert!(v > prev);
        prev = v;
    }
    done.store(true, Ordering::Relaxed);
    readers.into_iter().for_each(|r| r.join().unwrap());
}
