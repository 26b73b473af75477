//! Synthetic e-commerce world with latent content structure.
//!
//! Every item, user and query carries a unit-norm latent style vector. Stub
//! image and text features are two different fixed linear views of that
//! latent plus independent hash-expanded noise, and click labels come from a
//! known logistic click model over the same latents. Everything is a pure
//! function of [`WorldConfig`].

mod ctr;
mod purchases;
mod splits;

pub use ctr::{generate_ctr_dataset, ClickModel, CtrDataset};
pub use purchases::{generate_purchase_log, PurchaseLog, PurchaseRow};
pub use splits::{split_cold_start, train_test_split, ColdStartSplit};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub(crate) use crate::encoders::mix64;
use crate::encoders::{ItemFeatures, Modality, StubFeatureProvider};
use crate::numerics::Tensor;

/// Key namespaces so items, users and queries never collide.
pub const USER_KEY_BASE: u64 = 1 << 40;
pub const PURCHASE_QUERY_BASE: u64 = 2 << 40;
pub const CTR_QUERY_BASE: u64 = 3 << 40;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("unknown key {0}")]
    UnknownKey(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub n_categories: usize,
    pub latent_dim: usize,
    pub n_ctr_samples: usize,
    pub n_purchases: usize,
    /// Click-model weight on content similarity.
    pub w_c: f64,
    /// Click-model weight on item popularity.
    pub w_p: f64,
    /// Standard deviation of the Gaussian term added to the click logit.
    pub noise_scale: f64,
    /// Per-coordinate feature noise, relative to the per-coordinate signal scale.
    pub feature_noise: f64,
    /// Spread of item latents around their category centroid.
    pub category_spread: f64,
    /// Spread of user interests around their home category centroid.
    pub user_spread: f64,
    /// Softmax temperature for picking the purchased item; `0` means argmax.
    pub purchase_temperature: f64,
    /// Concentration of behavior sampling around the user's interest.
    pub behavior_concentration: f64,
    pub min_behaviors: usize,
    pub max_behaviors: usize,
    /// Probability that a search query stays in the user's home category.
    pub query_home_prob: f64,
    /// Probability that an impression comes from the query's category.
    pub target_in_query_category: f64,
    pub d_img: usize,
    pub d_txt: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_items: 2000,
            n_users: 5000,
            n_categories: 20,
            latent_dim: 8,
            n_ctr_samples: 50_000,
            n_purchases: 6000,
            w_c: 4.0,
            w_p: 1.0,
            noise_scale: 0.5,
            feature_noise: 0.3,
            category_spread: 0.6,
            user_spread: 1.0,
            purchase_temperature: 0.05,
            behavior_concentration: 8.0,
            min_behaviors: 4,
            max_behaviors: 16,
            query_home_prob: 0.5,
            target_in_query_category: 0.7,
            d_img: 32,
            d_txt: 32,
            test_fraction: 0.2,
            seed: 1,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: &str| Err(SynthError::InvalidConfig(msg.to_string()));
        if self.n_items == 0 || self.n_users == 0 || self.n_categories == 0 || self.latent_dim == 0 {
            return bad("counts must be at least 1");
        }
        if self.n_ctr_samples == 0 || self.n_purchases == 0 || self.d_img == 0 || self.d_txt == 0 {
            return bad("sample counts and feature dims must be at least 1");
        }
        if self.w_c < 0.0 || self.w_p < 0.0 || self.noise_scale < 0.0 || self.feature_noise < 0.0 {
            return bad("weights and noise scales must be non-negative");
        }
        if self.purchase_temperature < 0.0 || self.behavior_concentration < 0.0 {
            return bad("temperatures must be non-negative");
        }
        if self.min_behaviors == 0 || self.min_behaviors > self.max_behaviors {
            return bad("need 1 <= min_behaviors <= max_behaviors");
        }
        for (name, p) in [
            ("query_home_prob", self.query_home_prob),
            ("target_in_query_category", self.target_in_query_category),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::InvalidConfig(format!("{name} must be in [0, 1]")));
            }
        }
        Ok(())
    }

    /// Independent RNG stream per generation stage.
    pub(crate) fn rng(&self, stream: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix64(self.seed ^ mix64(stream)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentItem {
    pub key: u64,
    pub category: usize,
    /// Unit-norm latent style.
    pub z: Vec<f64>,
    /// In `[0, 1)`; larger is newer.
    pub birth_time: f64,
    pub popularity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentUser {
    pub key: u64,
    pub home_category: usize,
    pub interest: Vec<f64>,
    /// Fixed behavior history, most recent last.
    pub behaviors: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub key: u64,
    pub category: usize,
    pub z: Vec<f64>,
}

pub(crate) fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub(crate) fn gaussian_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `normalize(center + spread · g / √d)` for standard normal `g`.
pub(crate) fn jitter<R: Rng>(rng: &mut R, center: &[f64], spread: f64) -> Vec<f64> {
    let d = center.len();
    let g = gaussian_vec(rng, d, spread / (d as f64).sqrt());
    normalize(center.iter().zip(g).map(|(c, e)| c + e).collect())
}

/// Items, category centroids, and the feature views of latent vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub items: Vec<LatentItem>,
    pub centroids: Vec<Vec<f64>>,
    /// `[d_img, latent_dim]`, row-major.
    pub image_map: Vec<f64>,
    /// `[d_txt, latent_dim]`, row-major.
    pub text_map: Vec<f64>,
    pub image_noise: StubFeatureProvider,
    pub text_noise: StubFeatureProvider,
    latent_dim: usize,
    noise_amplitude: f64,
}

/// Builds the catalog: centroids, item latents, and the two feature views.
pub fn generate_catalog(cfg: &WorldConfig) -> Result<Catalog, SynthError> {
    cfg.validate()?;
    let d = cfg.latent_dim;
    let mut rng = cfg.rng(1);
    let centroids: Vec<Vec<f64>> = (0..cfg.n_categories)
        .map(|_| normalize(gaussian_vec(&mut rng, d, 1.0)))
        .collect();
    let items = (0..cfg.n_items)
        .map(|i| {
            let category = i % cfg.n_categories;
            let z = jitter(&mut rng, &centroids[category], cfg.category_spread);
            LatentItem {
                key: i as u64,
                category,
                z,
                birth_time: rng.random::<f64>(),
                popularity: rng.sample(StandardNormal),
            }
        })
        .collect();
    let map_scale = 1.0 / (d as f64).sqrt();
    let image_map = gaussian_vec(&mut rng, cfg.d_img * d, map_scale);
    let text_map = gaussian_vec(&mut rng, cfg.d_txt * d, map_scale);
    Ok(Catalog {
        items,
        centroids,
        image_map,
        text_map,
        image_noise: StubFeatureProvider::new(Modality::Image, cfg.d_img, mix64(cfg.seed ^ 0x1111)),
        text_noise: StubFeatureProvider::new(Modality::Text, cfg.d_txt, mix64(cfg.seed ^ 0x2222)),
        latent_dim: d,
        // Each coordinate of a mapped unit latent has standard deviation 1/√d.
        noise_amplitude: cfg.feature_noise * map_scale,
    })
}

impl Catalog {
    pub fn item(&self, key: u64) -> Option<&LatentItem> {
        self.items.get(usize::try_from(key).ok()?).filter(|it| it.key == key)
    }

    pub fn category_of(&self, key: u64) -> Option<usize> {
        self.item(key).map(|it| it.category)
    }

    fn view(&self, map: &[f64], noise: &StubFeatureProvider, z: &[f64], key: u64) -> Tensor {
        let d = self.latent_dim;
        let eps = noise.values(key);
        let data = map
            .chunks(d)
            .zip(eps)
            .map(|(row, e)| row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + self.noise_amplitude * e)
            .collect::<Vec<_>>();
        Tensor::from_parts(vec![data.len()], data)
    }

    /// Image-backbone feature of any entity with latent `z`.
    pub fn image_feature(&self, z: &[f64], key: u64) -> Tensor {
        self.view(&self.image_map, &self.image_noise, z, key)
    }

    pub fn text_feature(&self, z: &[f64], key: u64) -> Tensor {
        self.view(&self.text_map, &self.text_noise, z, key)
    }

    pub fn item_features(&self, key: u64) -> Result<ItemFeatures, SynthError> {
        let item = self.item(key).ok_or(SynthError::UnknownKey(key))?;
        Ok(ItemFeatures {
            key,
            image: self.image_feature(&item.z, key),
            text: self.text_feature(&item.z, key),
        })
    }

    pub fn all_item_features(&self) -> Vec<ItemFeatures> {
        self.items
            .iter()
            .map(|it| ItemFeatures {
                key: it.key,
                image: self.image_feature(&it.z, it.key),
                text: self.text_feature(&it.z, it.key),
            })
            .collect()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }
}

/// Complete generated world: catalog, users, purchase log and CTR dataset.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub catalog: Catalog,
    pub users: Vec<LatentUser>,
    pub purchases: PurchaseLog,
    pub ctr: CtrDataset,
}

impl World {
    pub fn generate(cfg: &WorldConfig) -> Result<Self, SynthError> {
        let catalog = generate_catalog(cfg)?;
        let users = generate_users(cfg, &catalog);
        let purchases = generate_purchase_log(cfg, &catalog);
        let ctr = generate_ctr_dataset(cfg, &catalog, &users);
        Ok(Self {
            config: cfg.clone(),
            catalog,
            users,
            purchases,
            ctr,
        })
    }

    /// Latent of any query key, from either the purchase log or the CTR dataset.
    pub fn query(&self, key: u64) -> Option<&Query> {
        if key >= CTR_QUERY_BASE {
            self.ctr.queries.get((key - CTR_QUERY_BASE) as usize)
        } else if key >= PURCHASE_QUERY_BASE {
            self.purchases.queries.get((key - PURCHASE_QUERY_BASE) as usize)
        } else {
            None
        }
    }

    /// Image-backbone feature of a query (the query is an image).
    pub fn query_feature(&self, key: u64) -> Result<Tensor, SynthError> {
        let q = self.query(key).ok_or(SynthError::UnknownKey(key))?;
        Ok(self.catalog.image_feature(&q.z, key))
    }
}

/// Users with a home category, an interest latent, and a fixed behavior history
/// sampled with probability ∝ `exp(κ · cos(interest, z))`.
pub fn generate_users(cfg: &WorldConfig, catalog: &Catalog) -> Vec<LatentUser> {
    let mut rng = cfg.rng(2);
    (0..cfg.n_users)
        .map(|u| {
            let home_category = rng.random_range(0..cfg.n_categories);
            let interest = jitter(&mut rng, &catalog.centroids[home_category], cfg.user_spread);
            let weights: Vec<f64> = catalog
                .items
                .iter()
                .map(|it| (cfg.behavior_concentration * cosine(&interest, &it.z)).exp())
                .collect();
            let sampler = CumulativeSampler::new(&weights);
            let len = rng.random_range(cfg.min_behaviors..=cfg.max_behaviors);
            let behaviors = (0..len).map(|_| catalog.items[sampler.sample(&mut rng)].key).collect();
            LatentUser {
                key: USER_KEY_BASE + u as u64,
                home_category,
                interest,
                behaviors,
            }
        })
        .collect()
}

/// Inverse-CDF sampling over fixed non-negative weights.
#[derive(Debug, Clone)]
pub(crate) struct CumulativeSampler {
    cumulative: Vec<f64>,
}

impl CumulativeSampler {
    pub(crate) fn new(weights: &[f64]) -> Self {
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Self { cumulative }
    }

    pub(crate) fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("non-empty weights");
        let u = rng.random::<f64>() * total;
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1)
    }
}
