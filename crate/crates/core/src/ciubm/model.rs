use std::collections::{HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::interest::{content_interest_var, fusion_interest_var, id_interest_var, scatter, InterestVector};
use super::{BehaviorSample, CiubmError};
use crate::encoders::{mix64, unit_interval};
use crate::numerics::{stable_sigmoid, Mlp, MlpVars, Optimizer, Tape, Tensor, Var};

/// Which pooled interest blocks enter the deep CTR input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CtrVariant {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "base+mim")]
    Mim,
    #[serde(rename = "mim_no_id")]
    MimNoId,
    #[serde(rename = "mim_no_content")]
    MimNoContent,
    #[serde(rename = "mim_no_fusion")]
    MimNoFusion,
}

impl CtrVariant {
    pub const ALL: [CtrVariant; 5] = [
        CtrVariant::Base,
        CtrVariant::Mim,
        CtrVariant::MimNoId,
        CtrVariant::MimNoContent,
        CtrVariant::MimNoFusion,
    ];

    /// `(id, content, fusion)` blocks kept.
    pub fn blocks(self) -> (bool, bool, bool) {
        match self {
            CtrVariant::Base => (true, false, false),
            CtrVariant::Mim => (true, true, true),
            CtrVariant::MimNoId => (false, true, true),
            CtrVariant::MimNoContent => (true, false, true),
            CtrVariant::MimNoFusion => (true, true, false),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CtrVariant::Base => "base",
            CtrVariant::Mim => "base+mim",
            CtrVariant::MimNoId => "mim_no_id",
            CtrVariant::MimNoContent => "mim_no_content",
            CtrVariant::MimNoFusion => "mim_no_fusion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn uses_content(self) -> bool {
        let (_, content, fusion) = self.blocks();
        content || fusion
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CtrConfig {
    pub d_id: usize,
    pub hidden: Vec<usize>,
    pub max_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Half-width of the uniform range ID embeddings start in.
    pub init_scale: f64,
    /// Fail on embedding-store misses instead of using the zero default.
    pub strict: bool,
    pub seed: u64,
}

impl Default for CtrConfig {
    fn default() -> Self {
        Self {
            d_id: 16,
            hidden: vec![64, 32],
            max_len: 16,
            epochs: 2,
            batch_size: 128,
            optimizer: Optimizer::adam(0.005),
            init_scale: 0.05,
            strict: false,
            seed: 3,
        }
    }
}

/// One resolved multi-modal embedding; misses are zero with `hit = false`.
#[derive(Debug, Clone, PartialEq)]
pub struct MmEntry {
    pub vector: Tensor,
    pub hit: bool,
}

/// Source of frozen multi-modal item embeddings.
pub trait MmLookup: Sync {
    fn d_mm(&self) -> usize;
    /// One entry per key, in key order.
    fn lookup(&self, keys: &[u64]) -> Result<Vec<MmEntry>, CiubmError>;
}

/// Source of raw query image features.
pub trait QueryFeatures: Sync {
    fn query_feature(&self, key: u64) -> Option<Tensor>;
}

impl QueryFeatures for HashMap<u64, Tensor> {
    fn query_feature(&self, key: u64) -> Option<Tensor> {
        self.get(&key).cloned()
    }
}

/// Sparse ID embeddings. Rows not yet trained are a deterministic hash of
/// `(seed, key)`, so lookups never need to allocate.
#[derive(Debug, Clone, PartialEq)]
pub struct IdEmbeddingTable {
    dim: usize,
    seed: u64,
    init_scale: f64,
    rows: HashMap<u64, Tensor>,
}

impl IdEmbeddingTable {
    pub fn new(dim: usize, seed: u64, init_scale: f64) -> Self {
        Self {
            dim,
            seed,
            init_scale,
            rows: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of rows that have been written.
    pub fn touched(&self) -> usize {
        self.rows.len()
    }

    fn initial(&self, key: u64) -> Tensor {
        let stream = mix64(mix64(self.seed) ^ key);
        let data = (0..self.dim as u64)
            .map(|j| (2.0 * unit_interval(mix64(stream ^ mix64(j + 1))) - 1.0) * self.init_scale)
            .collect();
        Tensor::from_parts(vec![self.dim], data)
    }

    pub fn get(&self, key: u64) -> Tensor {
        self.rows.get(&key).cloned().unwrap_or_else(|| self.initial(key))
    }

    pub fn get_mut(&mut self, key: u64) -> &mut Tensor {
        if !self.rows.contains_key(&key) {
            let init = self.initial(key);
            self.rows.insert(key, init);
        }
        self.rows.get_mut(&key).expect("just inserted")
    }
}

/// A sample with its behaviors truncated and all content features resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedSample {
    pub user_key: u64,
    pub target_key: u64,
    pub label: u8,
    /// Valid behaviors, oldest first.
    pub behaviors: Vec<u64>,
    /// `None` where the store missed.
    pub behavior_mm: Vec<Option<Tensor>>,
    pub target_mm: MmEntry,
    pub query: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtrModel {
    pub config: CtrConfig,
    pub variant: CtrVariant,
    pub id_table: IdEmbeddingTable,
    pub deepctr: Mlp,
    d_mm: usize,
    d_query: usize,
}

/// Handles for ID rows placed on a tape, each key bound once.
pub(crate) struct IdBinder<'a> {
    table: &'a IdEmbeddingTable,
    trainable: bool,
    pub(crate) vars: Vec<(u64, Var)>,
    index: HashMap<u64, usize>,
}

impl<'a> IdBinder<'a> {
    pub(crate) fn new(table: &'a IdEmbeddingTable, trainable: bool) -> Self {
        Self {
            table,
            trainable,
            vars: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn get(&mut self, tape: &mut Tape, key: u64) -> Var {
        if let Some(&i) = self.index.get(&key) {
            return self.vars[i].1;
        }
        let value = self.table.get(key);
        let v = if self.trainable {
            tape.leaf(value)
        } else {
            tape.constant(value)
        };
        self.index.insert(key, self.vars.len());
        self.vars.push((key, v));
        v
    }
}

impl CtrModel {
    pub fn new(config: CtrConfig, variant: CtrVariant, d_mm: usize, d_query: usize) -> Self {
        let mut sizes = vec![Self::input_dim_for(variant, config.d_id, d_mm, d_query)];
        sizes.extend(&config.hidden);
        sizes.push(1);
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(config.seed ^ 0xC7));
        let deepctr = Mlp::init(&sizes, &mut rng);
        let id_table = IdEmbeddingTable::new(config.d_id, mix64(config.seed ^ 0x1D), config.init_scale);
        Self {
            config,
            variant,
            id_table,
            deepctr,
            d_mm,
            d_query,
        }
    }

    /// Width of the deep CTR input for a variant.
    pub fn input_dim_for(variant: CtrVariant, d_id: usize, d_mm: usize, d_query: usize) -> usize {
        let (id, content, fusion) = variant.blocks();
        let pooled = usize::from(id) * d_id + usize::from(content) * d_mm + usize::from(fusion) * d_id;
        pooled + d_id + d_query + d_id + d_mm + 1
    }

    pub fn input_dim(&self) -> usize {
        self.deepctr.input_dim()
    }

    pub fn d_mm(&self) -> usize {
        self.d_mm
    }

    pub fn d_query(&self) -> usize {
        self.d_query
    }

    /// Resolves a batch of samples, fetching every distinct item key once.
    pub fn resolve_all(
        &self,
        samples: &[BehaviorSample],
        lookup: &dyn MmLookup,
        queries: &dyn QueryFeatures,
    ) -> Result<Vec<ResolvedSample>, CiubmError> {
        if lookup.d_mm() != self.d_mm {
            return Err(CiubmError::LengthMismatch {
                what: "mm lookup dimension",
                expected: self.d_mm,
                got: lookup.d_mm(),
            });
        }
        let max_len = self.config.max_len;
        let mut keys = Vec::new();
        let mut seen = HashSet::new();
        for s in samples {
            let start = s.behavior_keys.len().saturating_sub(max_len);
            for &k in s.behavior_keys[start..].iter().chain(std::iter::once(&s.target_key)) {
                if seen.insert(k) {
                    keys.push(k);
                }
            }
        }
        let entries = lookup.lookup(&keys)?;
        if entries.len() != keys.len() {
            return Err(CiubmError::LengthMismatch {
                what: "lookup response",
                expected: keys.len(),
                got: entries.len(),
            });
        }
        let table: HashMap<u64, MmEntry> = keys.into_iter().zip(entries).collect();
        samples.iter().map(|s| self.resolve_with(s, &table, queries)).collect()
    }

    fn resolve_with(
        &self,
        s: &BehaviorSample,
        table: &HashMap<u64, MmEntry>,
        queries: &dyn QueryFeatures,
    ) -> Result<ResolvedSample, CiubmError> {
        if s.label > 1 {
            return Err(CiubmError::BadLabel(s.label));
        }
        let fetch = |k: u64| -> Result<&MmEntry, CiubmError> {
            let e = table.get(&k).ok_or(CiubmError::MissingKey(k))?;
            if self.config.strict && !e.hit {
                return Err(CiubmError::MissingKey(k));
            }
            Ok(e)
        };
        let start = s.behavior_keys.len().saturating_sub(self.config.max_len);
        let behaviors = s.behavior_keys[start..].to_vec();
        let behavior_mm = behaviors
            .iter()
            .map(|&k| fetch(k).map(|e| e.hit.then(|| e.vector.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let target_mm = fetch(s.target_key)?.clone();
        let query = queries
            .query_feature(s.query_key)
            .ok_or(CiubmError::MissingQuery(s.query_key))?;
        if query.shape() != [self.d_query] {
            return Err(CiubmError::LengthMismatch {
                what: "query feature",
                expected: self.d_query,
                got: query.len(),
            });
        }
        Ok(ResolvedSample {
            user_key: s.user_key,
            target_key: s.target_key,
            label: s.label,
            behaviors,
            behavior_mm,
            target_mm,
            query,
        })
    }

    /// Records the logit for one sample and returns it with the content weights.
    pub(crate) fn logit_var(
        &self,
        tape: &mut Tape,
        mlp: &MlpVars,
        ids: &mut IdBinder,
        s: &ResolvedSample,
    ) -> Result<(Var, Option<Var>), CiubmError> {
        let (use_id, use_content, use_fusion) = self.variant.blocks();
        let target_id = ids.get(tape, s.target_key);
        let behavior_ids: Vec<Var> = s.behaviors.iter().map(|&k| ids.get(tape, k)).collect();
        let target_mm = tape.constant(s.target_mm.vector.clone());
        let mut parts = Vec::with_capacity(8);
        if use_id {
            parts.push(id_interest_var(tape, target_id, &behavior_ids)?);
        }
        let mut alpha_var = None;
        if use_content || use_fusion {
            // A missing target or behavior embedding takes no part in content pooling.
            let (mm_rows, id_rows): (Vec<Var>, Vec<Var>) = if s.target_mm.hit {
                s.behavior_mm
                    .iter()
                    .zip(&behavior_ids)
                    .filter_map(|(mm, &id)| mm.as_ref().map(|m| (tape.constant(m.clone()), id)))
                    .unzip()
            } else {
                (Vec::new(), Vec::new())
            };
            let (alpha, h_mm) = content_interest_var(tape, target_mm, &mm_rows)?;
            alpha_var = Some(alpha);
            if use_content {
                parts.push(h_mm);
            }
            if use_fusion {
                parts.push(fusion_interest_var(tape, alpha, &id_rows, self.config.d_id)?);
            }
        }
        parts.push(ids.get(tape, s.user_key));
        parts.push(tape.constant(s.query.clone()));
        parts.push(target_id);
        parts.push(target_mm);
        let miss = if s.target_mm.hit { 0.0 } else { 1.0 };
        parts.push(tape.constant(Tensor::from_parts(vec![1], vec![miss])));
        let x = tape.concat(&parts)?;
        let out = mlp.forward(tape, x)?;
        Ok((tape.pick(out, 0)?, alpha_var))
    }

    /// Click probability for a resolved sample.
    pub fn score(&self, s: &ResolvedSample) -> Result<f64, CiubmError> {
        let mut tape = Tape::new();
        let mlp = self.deepctr.bind(&mut tape, false);
        let mut ids = IdBinder::new(&self.id_table, false);
        let (logit, _) = self.logit_var(&mut tape, &mlp, &mut ids, s)?;
        Ok(stable_sigmoid(tape.value(logit).item()))
    }

    /// The three pooled interest vectors, whether or not the variant uses them.
    pub fn interest(&self, s: &ResolvedSample) -> Result<InterestVector, CiubmError> {
        let mut tape = Tape::new();
        let mut ids = IdBinder::new(&self.id_table, false);
        let target_id = ids.get(&mut tape, s.target_key);
        let behavior_ids: Vec<Var> = s.behaviors.iter().map(|&k| ids.get(&mut tape, k)).collect();
        let h_b_id = id_interest_var(&mut tape, target_id, &behavior_ids)?;
        let mask: Vec<bool> = s.behavior_mm.iter().map(|m| m.is_some() && s.target_mm.hit).collect();
        let mm_rows: Vec<Var> = s
            .behavior_mm
            .iter()
            .zip(&mask)
            .filter(|(_, &keep)| keep)
            .map(|(m, _)| tape.constant(m.clone().expect("masked")))
            .collect();
        let id_rows: Vec<Var> = behavior_ids
            .iter()
            .zip(&mask)
            .filter(|(_, &k)| k)
            .map(|(v, _)| *v)
            .collect();
        let target_mm = tape.constant(s.target_mm.vector.clone());
        let (alpha, h_b_mm) = content_interest_var(&mut tape, target_mm, &mm_rows)?;
        let h_b_fusion = fusion_interest_var(&mut tape, alpha, &id_rows, self.config.d_id)?;
        Ok(InterestVector {
            h_b_id: tape.value(h_b_id).clone(),
            h_b_mm: tape.value(h_b_mm).clone(),
            h_b_fusion: tape.value(h_b_fusion).clone(),
            alpha_mm: scatter(tape.value(alpha).data(), &mask),
        })
    }
}

/// Scores one raw sample: resolve embeddings and query feature, pool, and run
/// the deep CTR head. Returns `ŷ ∈ (0, 1)`.
pub fn ciubm_forward(
    model: &CtrModel,
    sample: &BehaviorSample,
    lookup: &dyn MmLookup,
    queries: &dyn QueryFeatures,
) -> Result<f64, CiubmError> {
    let resolved = model.resolve_all(std::slice::from_ref(sample), lookup, queries)?;
    model.score(&resolved[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Mlp;

    struct MapLookup(HashMap<u64, Tensor>, usize);

    impl MmLookup for MapLookup {
        fn d_mm(&self) -> usize {
            self.1
        }

        fn lookup(&self, keys: &[u64]) -> Result<Vec<MmEntry>, CiubmError> {
            Ok(keys
                .iter()
                .map(|k| match self.0.get(k) {
                    Some(v) => MmEntry {
                        vector: v.clone(),
                        hit: true,
                    },
                    None => MmEntry {
                        vector: Tensor::zeros(vec![self.1]),
                        hit: false,
                    },
                })
                .collect())
        }
    }

    fn fixture() -> (BehaviorSample, MapLookup, HashMap<u64, Tensor>) {
        let mm = |a: f64, b: f64| Tensor::vector(vec![a, b, 0.5]).unwrap();
        let lookup = MapLookup(
            [
                (1, mm(1.0, 0.0)),
                (2, mm(0.0, 1.0)),
                (3, mm(0.5, 0.5)),
                (9, mm(0.7, -0.2)),
            ]
            .into(),
            3,
        );
        let queries = [(100, Tensor::vector(vec![0.1, -0.4]).unwrap())].into();
        let sample = BehaviorSample {
            user_key: 77,
            query_key: 100,
            target_key: 9,
            behavior_keys: vec![1, 2, 3],
            label: 1,
        };
        (sample, lookup, queries)
    }

    fn cfg() -> CtrConfig {
        CtrConfig {
            d_id: 4,
            hidden: vec![5],
            ..CtrConfig::default()
        }
    }

    #[test]
    fn zero_head_scores_half() {
        let (s, lookup, queries) = fixture();
        for v in CtrVariant::ALL {
            let mut m = CtrModel::new(cfg(), v, 3, 2);
            m.deepctr = Mlp::zeros(&m.deepctr.sizes());
            assert_eq!(ciubm_forward(&m, &s, &lookup, &queries).unwrap(), 0.5);
        }
    }

    #[test]
    fn mim_widens_input_by_dmm_plus_did() {
        let base = CtrModel::new(cfg(), CtrVariant::Base, 3, 2);
        let mim = CtrModel::new(cfg(), CtrVariant::Mim, 3, 2);
        assert_eq!(mim.input_dim() - base.input_dim(), 3 + 4);
    }

    #[test]
    fn score_matches_hand_composition() {
        let (s, lookup, queries) = fixture();
        let m = CtrModel::new(cfg(), CtrVariant::Mim, 3, 2);
        let r = &m.resolve_all(std::slice::from_ref(&s), &lookup, &queries).unwrap()[0];
        let target_id = m.id_table.get(9);
        let ids: Vec<Tensor> = [1, 2, 3].iter().map(|&k| m.id_table.get(k)).collect();
        let mms: Vec<Tensor> = [1, 2, 3].iter().map(|&k| lookup.0[&k].clone()).collect();
        let mask = [true; 3];
        let (h_id, _) = super::super::id_interest(&target_id, &ids, &mask).unwrap();
        let (alpha, h_mm) = super::super::content_interest(&lookup.0[&9], &mms, &mask).unwrap();
        let h_fu = super::super::fusion_interest(&alpha, &ids, &mask, 4).unwrap();
        let mut x = Vec::new();
        for t in [
            &h_id,
            &h_mm,
            &h_fu,
            &m.id_table.get(77),
            &queries[&100],
            &target_id,
            &lookup.0[&9],
        ] {
            x.extend_from_slice(t.data());
        }
        x.push(0.0);
        let expect = stable_sigmoid(m.deepctr.apply(&x)[0]);
        assert_eq!(m.score(r).unwrap(), expect);
        let iv = m.interest(r).unwrap();
        assert_eq!(iv.alpha_mm, alpha);
        assert_eq!(iv.h_b_fusion, h_fu);
    }

    #[test]
    fn missing_target_masks_content_and_sets_flag() {
        let (mut s, lookup, queries) = fixture();
        s.target_key = 555;
        let m = CtrModel::new(cfg(), CtrVariant::Mim, 3, 2);
        let r = &m.resolve_all(std::slice::from_ref(&s), &lookup, &queries).unwrap()[0];
        assert!(!r.target_mm.hit);
        let iv = m.interest(r).unwrap();
        assert!(iv.alpha_mm.data().iter().all(|&a| a == 0.0));
        assert!(iv.h_b_mm.data().iter().all(|&a| a == 0.0));
        let strict = CtrModel::new(CtrConfig { strict: true, ..cfg() }, CtrVariant::Mim, 3, 2);
        assert_eq!(
            ciubm_forward(&strict, &s, &lookup, &queries).unwrap_err(),
            CiubmError::MissingKey(555)
        );
    }

    #[test]
    fn id_table_is_deterministic_and_lazy() {
        let t = IdEmbeddingTable::new(4, 9, 0.05);
        assert_eq!(t.get(5), t.get(5));
        assert_ne!(t.get(5), t.get(6));
        assert!(t.get(5).data().iter().all(|x| x.abs() <= 0.05));
        assert_eq!(t.touched(), 0);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in CtrVariant::ALL {
            assert_eq!(CtrVariant::parse(v.name()), Some(v));
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
    }
}
