use std::collections::HashSet;

use mim_core::ciubm::auc;
use mim_core::synthdata::{generate_catalog, split_cold_start, train_test_split, World, WorldConfig};
use nalgebra::DMatrix;

fn small(seed: u64) -> WorldConfig {
    WorldConfig {
        n_items: 400,
        n_users: 500,
        n_ctr_samples: 10_000,
        n_purchases: 500,
        seed,
        ..WorldConfig::default()
    }
}

#[test]
fn noiseless_features_are_an_exact_linear_view_of_the_latent() {
    let cfg = WorldConfig {
        feature_noise: 0.0,
        ..small(3)
    };
    let catalog = generate_catalog(&cfg).unwrap();
    let n = catalog.items.len();
    let d = cfg.latent_dim;
    let z = DMatrix::from_fn(n, d, |r, c| catalog.items[r].z[c]);
    for (dim, pick) in [(cfg.d_img, 0usize), (cfg.d_txt, 1usize)] {
        let f = DMatrix::from_fn(n, dim, |r, c| {
            let feats = catalog.item_features(catalog.items[r].key).unwrap();
            if pick == 0 {
                feats.image.data()[c]
            } else {
                feats.text.data()[c]
            }
        });
        // Least-squares map z → feature, then solve back for z through its transpose.
        let svd = z.clone().svd(true, true);
        let map = svd.solve(&f, 1e-12).unwrap();
        let residual = (&z * &map - &f).abs().max();
        assert!(residual < 1e-9, "feature residual {residual}");
        let back = map.transpose().svd(true, true).solve(&f.transpose(), 1e-12).unwrap();
        let recovery = (back.transpose() - &z).abs().max();
        assert!(recovery < 1e-9, "latent recovery error {recovery}");
    }
}

#[test]
fn noisy_features_are_not_exactly_linear() {
    let catalog = generate_catalog(&small(3)).unwrap();
    let n = catalog.items.len();
    let z = DMatrix::from_fn(n, 8, |r, c| catalog.items[r].z[c]);
    let f = DMatrix::from_fn(n, 32, |r, c| {
        catalog.item_features(catalog.items[r].key).unwrap().image.data()[c]
    });
    let map = z.clone().svd(true, true).solve(&f, 1e-12).unwrap();
    assert!((&z * &map - &f).abs().max() > 1e-3);
}

/// One-feature logistic regression fitted by Newton's method.
fn fit_logistic(x: &[f64], y: &[u8]) -> (f64, f64) {
    let (mut w, mut b) = (0.0, 0.0);
    for _ in 0..25 {
        let (mut gw, mut gb, mut hww, mut hwb, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&xi, &yi) in x.iter().zip(y) {
            let p = 1.0 / (1.0 + (-(w * xi + b)).exp());
            let r = p - f64::from(yi);
            let s = p * (1.0 - p);
            gw += r * xi;
            gb += r;
            hww += s * xi * xi;
            hwb += s * xi;
            hbb += s;
        }
        let det = hww * hbb - hwb * hwb;
        w -= (hbb * gw - hwb * gb) / det;
        b -= (hww * gb - hwb * gw) / det;
    }
    (w, b)
}

#[test]
fn logistic_on_true_content_score_reaches_auc_070() {
    let world = World::generate(&WorldConfig::default()).unwrap();
    let split = split_cold_start(&world.catalog.items, 10);
    let (train, test, _) = train_test_split(&world.ctr.samples, 0.2, 1, &split);
    let x = |idx: &[usize]| idx.iter().map(|&i| world.ctr.content_score[i]).collect::<Vec<_>>();
    let y = |idx: &[usize]| idx.iter().map(|&i| world.ctr.samples[i].label).collect::<Vec<_>>();
    let (w, b) = fit_logistic(&x(&train), &y(&train));
    assert!(w > 0.0);
    let scores: Vec<f64> = x(&test).iter().map(|&xi| 1.0 / (1.0 + (-(w * xi + b)).exp())).collect();
    let a = auc(&scores, &y(&test)).unwrap();
    assert!(a >= 0.70, "held-out AUC {a}");
}

#[test]
fn neutral_click_model_is_a_fair_coin_across_seeds() {
    for seed in 1..=5 {
        let cfg = WorldConfig {
            w_c: 0.0,
            w_p: 0.0,
            noise_scale: 0.0,
            ..small(seed)
        };
        let world = World::generate(&cfg).unwrap();
        let rate = world.ctr.samples.iter().filter(|s| s.label == 1).count() as f64 / 10_000.0;
        assert!((0.45..=0.55).contains(&rate), "seed {seed}: rate {rate}");
    }
}

#[test]
fn newest_bucket_never_appears_as_a_training_target() {
    let world = World::generate(&small(2)).unwrap();
    let split = split_cold_start(&world.catalog.items, 10);
    let (train, test, dropped) = train_test_split(&world.ctr.samples, 0.2, 2, &split);
    let newest: HashSet<u64> = split.newest().iter().copied().collect();
    assert!(train
        .iter()
        .all(|&i| !newest.contains(&world.ctr.samples[i].target_key)));
    assert!(dropped > 0);
    assert!(test.iter().any(|&i| newest.contains(&world.ctr.samples[i].target_key)));
}

#[test]
fn purchases_stay_near_their_queries() {
    let world = World::generate(&small(4)).unwrap();
    let cos = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut bought = 0.0;
    let mut other = 0.0;
    for (i, r) in world.purchases.rows.iter().enumerate() {
        let q = &world.query(r.query_key).unwrap().z;
        bought += cos(q, &world.catalog.item(r.item_key).unwrap().z);
        other += cos(q, &world.catalog.items[(i * 131) % world.catalog.items.len()].z);
    }
    assert!(bought > other);
}
