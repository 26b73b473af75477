//! Visual-search purchase log: an image query drawn near a category centroid
//! and the item bought in response.

use rand::Rng;

use super::{cosine, jitter, Catalog, Query, WorldConfig, PURCHASE_QUERY_BASE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PurchaseRow {
    pub query_key: u64,
    pub item_key: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PurchaseLog {
    pub rows: Vec<PurchaseRow>,
    /// Indexed by `query_key - PURCHASE_QUERY_BASE`.
    pub queries: Vec<Query>,
}

/// One purchase per query. The bought item is drawn from the query's category
/// by a softmax over `cos(z_q, z_i) / purchase_temperature`, or the argmax when
/// the temperature is zero.
pub fn generate_purchase_log(cfg: &WorldConfig, catalog: &Catalog) -> PurchaseLog {
    let mut rng = cfg.rng(3);
    let by_category = catalog_by_category(catalog, cfg.n_categories);
    let mut rows = Vec::with_capacity(cfg.n_purchases);
    let mut queries = Vec::with_capacity(cfg.n_purchases);
    for i in 0..cfg.n_purchases {
        let category = loop {
            let c = rng.random_range(0..cfg.n_categories);
            if !by_category[c].is_empty() {
                break c;
            }
        };
        let key = PURCHASE_QUERY_BASE + i as u64;
        let z = jitter(&mut rng, &catalog.centroids[category], cfg.category_spread);
        let members = &by_category[category];
        let sims: Vec<f64> = members.iter().map(|&m| cosine(&z, &catalog.items[m].z)).collect();
        let chosen = if cfg.purchase_temperature == 0.0 {
            argmax(&sims)
        } else {
            let top = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = sims
                .iter()
                .map(|s| ((s - top) / cfg.purchase_temperature).exp())
                .collect();
            super::CumulativeSampler::new(&weights).sample(&mut rng)
        };
        rows.push(PurchaseRow {
            query_key: key,
            item_key: catalog.items[members[chosen]].key,
        });
        queries.push(Query { key, category, z });
    }
    PurchaseLog { rows, queries }
}

pub(crate) fn catalog_by_category(catalog: &Catalog, n_categories: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n_categories];
    for (idx, it) in catalog.items.iter().enumerate() {
        out[it.category].push(idx);
    }
    out
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_catalog;

    fn cfg() -> WorldConfig {
        WorldConfig {
            n_items: 300,
            n_purchases: 500,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn argmax_limit_picks_most_similar_item_in_category() {
        let cfg = WorldConfig {
            purchase_temperature: 0.0,
            ..cfg()
        };
        let catalog = generate_catalog(&cfg).unwrap();
        let log = generate_purchase_log(&cfg, &catalog);
        for (row, q) in log.rows.iter().zip(&log.queries) {
            let bought = cosine(&q.z, &catalog.items[row.item_key as usize].z);
            for it in catalog.items.iter().filter(|it| it.category == q.category) {
                assert!(cosine(&q.z, &it.z) <= bought);
            }
            assert_eq!(catalog.items[row.item_key as usize].category, q.category);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = cfg();
        let catalog = generate_catalog(&cfg).unwrap();
        assert_eq!(
            generate_purchase_log(&cfg, &catalog),
            generate_purchase_log(&cfg, &catalog)
        );
        let other = WorldConfig { seed: 2, ..cfg.clone() };
        let catalog2 = generate_catalog(&other).unwrap();
        assert_ne!(
            generate_purchase_log(&cfg, &catalog).rows,
            generate_purchase_log(&other, &catalog2).rows
        );
    }

    #[test]
    fn purchased_items_are_closer_than_random_items() {
        let cfg = cfg();
        let catalog = generate_catalog(&cfg).unwrap();
        let log = generate_purchase_log(&cfg, &catalog);
        let n = log.rows.len() as f64;
        let bought: f64 = log
            .rows
            .iter()
            .zip(&log.queries)
            .map(|(r, q)| cosine(&q.z, &catalog.items[r.item_key as usize].z))
            .sum::<f64>()
            / n;
        let random: f64 = log
            .queries
            .iter()
            .enumerate()
            .map(|(i, q)| cosine(&q.z, &catalog.items[(i * 7919) % catalog.items.len()].z))
            .sum::<f64>()
            / n;
        assert!(bought > random + 0.2, "{bought} vs {random}");
    }
}
