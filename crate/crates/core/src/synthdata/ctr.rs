//! Impressions with click labels from the ground-truth click model.

use rand::Rng;
use rand_distr::StandardNormal;

use super::purchases::catalog_by_category;
use super::{cosine, jitter, Catalog, CumulativeSampler, LatentUser, Query, WorldConfig, CTR_QUERY_BASE};
use crate::ciubm::BehaviorSample;
use crate::numerics::stable_sigmoid;

/// `P(click) = σ(w_c · cos(u + z_q, z_t) + w_p · popularity + noise · ε)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClickModel {
    pub w_c: f64,
    pub w_p: f64,
    pub noise_scale: f64,
}

impl ClickModel {
    pub fn from_config(cfg: &WorldConfig) -> Self {
        Self {
            w_c: cfg.w_c,
            w_p: cfg.w_p,
            noise_scale: cfg.noise_scale,
        }
    }

    /// Content similarity the click model scores.
    pub fn content_score(interest: &[f64], query: &[f64], target: &[f64]) -> f64 {
        let combined: Vec<f64> = interest.iter().zip(query).map(|(a, b)| a + b).collect();
        cosine(&combined, target)
    }

    /// Click probability given the content score, target popularity and a
    /// standard normal draw.
    pub fn probability(&self, content: f64, popularity: f64, eps: f64) -> f64 {
        stable_sigmoid(self.w_c * content + self.w_p * popularity + self.noise_scale * eps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtrDataset {
    pub samples: Vec<BehaviorSample>,
    /// Indexed by `query_key - CTR_QUERY_BASE`, one query per sample.
    pub queries: Vec<Query>,
    /// True click probability each label was drawn from.
    pub click_prob: Vec<f64>,
    /// `cos(u + z_q, z_t)` per sample.
    pub content_score: Vec<f64>,
}

/// One impression per sample: a random user issues a query (home category with
/// probability `query_home_prob`), a target is exposed from the query's
/// category with probability `target_in_query_category`, and the label is a
/// Bernoulli draw from the click model. Older items get more exposure.
pub fn generate_ctr_dataset(cfg: &WorldConfig, catalog: &Catalog, users: &[LatentUser]) -> CtrDataset {
    let mut rng = cfg.rng(4);
    let model = ClickModel::from_config(cfg);
    let exposure = |idx: usize| 1.5 - catalog.items[idx].birth_time;
    let by_category = catalog_by_category(catalog, cfg.n_categories);
    let category_samplers: Vec<Option<CumulativeSampler>> = by_category
        .iter()
        .map(|members| {
            (!members.is_empty())
                .then(|| CumulativeSampler::new(&members.iter().map(|&m| exposure(m)).collect::<Vec<_>>()))
        })
        .collect();
    let global = CumulativeSampler::new(&(0..catalog.items.len()).map(exposure).collect::<Vec<_>>());

    let n = cfg.n_ctr_samples;
    let mut out = CtrDataset {
        samples: Vec::with_capacity(n),
        queries: Vec::with_capacity(n),
        click_prob: Vec::with_capacity(n),
        content_score: Vec::with_capacity(n),
    };
    for i in 0..n {
        let user = &users[rng.random_range(0..users.len())];
        let category = if rng.random::<f64>() < cfg.query_home_prob {
            user.home_category
        } else {
            rng.random_range(0..cfg.n_categories)
        };
        let key = CTR_QUERY_BASE + i as u64;
        let z_q = jitter(&mut rng, &catalog.centroids[category], cfg.category_spread);
        let in_category = rng.random::<f64>() < cfg.target_in_query_category;
        let target = match (&category_samplers[category], in_category) {
            (Some(s), true) => by_category[category][s.sample(&mut rng)],
            _ => global.sample(&mut rng),
        };
        let item = &catalog.items[target];
        let content = ClickModel::content_score(&user.interest, &z_q, &item.z);
        let eps: f64 = rng.sample(StandardNormal);
        let p = model.probability(content, item.popularity, eps);
        let label = u8::from(rng.random::<f64>() < p);
        out.samples.push(BehaviorSample {
            user_key: user.key,
            query_key: key,
            target_key: item.key,
            behavior_keys: user.behaviors.clone(),
            label,
        });
        out.queries.push(Query { key, category, z: z_q });
        out.click_prob.push(p);
        out.content_score.push(content);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ciubm::auc;
    use crate::synthdata::{generate_catalog, generate_users};

    fn dataset(cfg: &WorldConfig) -> CtrDataset {
        let catalog = generate_catalog(cfg).unwrap();
        let users = generate_users(cfg, &catalog);
        generate_ctr_dataset(cfg, &catalog, &users)
    }

    fn small() -> WorldConfig {
        WorldConfig {
            n_items: 400,
            n_users: 300,
            n_ctr_samples: 10_000,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn neutral_click_model_gives_half_rate() {
        let cfg = WorldConfig {
            w_c: 0.0,
            w_p: 0.0,
            noise_scale: 0.0,
            ..small()
        };
        let data = dataset(&cfg);
        assert!(data.click_prob.iter().all(|&p| p == 0.5));
        let rate = data.samples.iter().map(|s| s.label as f64).sum::<f64>() / data.samples.len() as f64;
        assert!((0.45..=0.55).contains(&rate), "{rate}");
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = WorldConfig {
            n_ctr_samples: 500,
            ..small()
        };
        assert_eq!(dataset(&cfg), dataset(&cfg));
    }

    #[test]
    fn oracle_probabilities_rank_labels_well() {
        let data = dataset(&small());
        let labels: Vec<u8> = data.samples.iter().map(|s| s.label).collect();
        let a = auc(&data.click_prob, &labels).unwrap();
        assert!(a > 0.7, "oracle auc {a}");
    }

    #[test]
    fn behaviors_follow_user_history() {
        let cfg = small();
        let catalog = generate_catalog(&cfg).unwrap();
        let users = generate_users(&cfg, &catalog);
        let data = generate_ctr_dataset(&cfg, &catalog, &users);
        for s in data.samples.iter().take(50) {
            let u = &users[(s.user_key - super::super::USER_KEY_BASE) as usize];
            assert_eq!(s.behavior_keys, u.behaviors);
            assert!(s.behavior_keys.len() >= cfg.min_behaviors && s.behavior_keys.len() <= cfg.max_behaviors);
        }
    }
}
