//! Seeded hash-expansion feature providers standing in for pretrained
//! vision and language backbones.

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    fn salt(self) -> u64 {
        match self {
            Modality::Image => 0x494d_4147_455f_5631,
            Modality::Text => 0x5445_5854_5f5f_5631,
        }
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Maps a hash to `[0, 1)` using its top 53 bits.
pub fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Feature vector produced by a provider.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalFeature(pub Tensor);

impl ModalFeature {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Deterministic pseudo-random features keyed by entity id.
///
/// Coordinates are uniform on `[−√3, √3)`, so each has unit variance. The
/// output depends only on `(modality, dim, seed, key)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubFeatureProvider {
    pub modality: Modality,
    pub dim: usize,
    pub seed: u64,
}

impl StubFeatureProvider {
    pub fn new(modality: Modality, dim: usize, seed: u64) -> Self {
        Self { modality, dim, seed }
    }

    /// Raw coordinates for `key`.
    pub fn values(&self, key: u64) -> Vec<f64> {
        let stream = mix64(mix64(self.seed ^ self.modality.salt()) ^ key);
        let half_width = 3f64.sqrt();
        (0..self.dim as u64)
            .map(|j| {
                let u = unit_interval(mix64(stream ^ mix64(j)));
                (2.0 * u - 1.0) * half_width
            })
            .collect()
    }

    pub fn provide(&self, key: u64) -> ModalFeature {
        ModalFeature(Tensor::from_parts(vec![self.dim], self.values(key)))
    }
}
