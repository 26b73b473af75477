//! Mini-batch training and scoring of the CTR model.
//!
//! Each batch is split into fixed-size chunks scored on the rayon pool;
//! chunk gradients are summed in chunk order, so results do not depend on
//! the number of threads.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::model::IdBinder;
use super::{BehaviorSample, CiubmError, CtrModel, MmLookup, QueryFeatures, ResolvedSample};
use crate::encoders::mix64;
use crate::numerics::{ParamState, Tape, Tensor};

const CHUNK: usize = 16;

/// Summed loss and gradients over some samples.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    pub loss: f64,
    pub count: usize,
    /// Aligned with `deepctr.params()`.
    pub mlp: Vec<Vec<f64>>,
    pub ids: BTreeMap<u64, Vec<f64>>,
}

impl BatchGradients {
    fn zeros(model: &CtrModel) -> Self {
        Self {
            loss: 0.0,
            count: 0,
            mlp: model.deepctr.params().iter().map(|p| vec![0.0; p.len()]).collect(),
            ids: BTreeMap::new(),
        }
    }

    fn merge(&mut self, other: BatchGradients) {
        self.loss += other.loss;
        self.count += other.count;
        for (a, b) in self.mlp.iter_mut().zip(other.mlp) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (k, g) in other.ids {
            match self.ids.get_mut(&k) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                None => {
                    self.ids.insert(k, g);
                }
            }
        }
    }
}

impl CtrModel {
    /// Binary cross-entropy and gradients summed over `samples`.
    pub fn gradients(&self, samples: &[&ResolvedSample]) -> Result<BatchGradients, CiubmError> {
        let mut acc = BatchGradients::zeros(self);
        for s in samples {
            let mut tape = Tape::unchecked();
            let mlp = self.deepctr.bind(&mut tape, true);
            let mut ids = IdBinder::new(&self.id_table, true);
            let (z, _) = self.logit_var(&mut tape, &mlp, &mut ids, s)?;
            // log(1 + e^z) - y z
            let zero = tape.constant(Tensor::from_parts(vec![1], vec![0.0]));
            let pair = tape.concat(&[zero, z])?;
            let softplus = tape.log_sum_exp(pair)?;
            let yz = tape.scale(z, f64::from(s.label))?;
            let loss = tape.sub(softplus, yz)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(CiubmError::Numerics(crate::numerics::NumericsError::NonFinite {
                    op: "ctr loss",
                    index: 0,
                }));
            }
            let g = tape.backward(loss, &Tensor::from_parts(Vec::new(), vec![1.0]))?;
            acc.loss += value;
            acc.count += 1;
            for (a, &v) in acc.mlp.iter_mut().zip(&mlp.params) {
                if let Some(gt) = g.get(v) {
                    a.iter_mut().zip(gt.data()).for_each(|(x, y)| *x += y);
                }
            }
            for &(key, v) in &ids.vars {
                if let Some(gt) = g.get(v) {
                    let slot = acc.ids.entry(key).or_insert_with(|| vec![0.0; gt.len()]);
                    slot.iter_mut().zip(gt.data()).for_each(|(x, y)| *x += y);
                }
            }
        }
        Ok(acc)
    }

    fn batch_gradients(&self, batch: &[&ResolvedSample]) -> Result<BatchGradients, CiubmError> {
        let parts: Vec<BatchGradients> = batch
            .par_chunks(CHUNK)
            .map(|chunk| self.gradients(chunk))
            .collect::<Result<_, _>>()?;
        let mut acc = BatchGradients::zeros(self);
        for p in parts {
            acc.merge(p);
        }
        Ok(acc)
    }
}

/// Optimizer state for the dense head and the sparse ID rows.
#[derive(Debug, Default)]
struct TrainState {
    mlp: Vec<ParamState>,
    ids: BTreeMap<u64, ParamState>,
}

fn apply(model: &mut CtrModel, grads: BatchGradients, state: &mut TrainState) {
    let scale = 1.0 / grads.count.max(1) as f64;
    let opt = model.config.optimizer;
    let mlp_grads: Vec<Tensor> = model
        .deepctr
        .params()
        .iter()
        .zip(&grads.mlp)
        .map(|(p, g)| Tensor::from_parts(p.shape().to_vec(), g.iter().map(|x| x * scale).collect()))
        .collect();
    opt.apply_all(model.deepctr.params_mut(), &mlp_grads, &mut state.mlp);
    for (key, g) in grads.ids {
        let g = Tensor::from_parts(vec![g.len()], g.into_iter().map(|x| x * scale).collect());
        let row = model.id_table.get_mut(key);
        opt.apply(row, &g, state.ids.entry(key).or_default());
    }
}

/// Trains on already-resolved samples; returns the mean log-loss per epoch.
pub fn train_resolved(model: &mut CtrModel, samples: &[ResolvedSample]) -> Result<Vec<f64>, CiubmError> {
    if samples.is_empty() {
        return Err(CiubmError::EmptyDataset);
    }
    if let Some(s) = samples.iter().find(|s| s.label > 1) {
        return Err(CiubmError::BadLabel(s.label));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(model.config.seed ^ 0x7A));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut state = TrainState::default();
    let mut trajectory = Vec::with_capacity(model.config.epochs);
    for _ in 0..model.config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(model.config.batch_size.max(1)) {
            let refs: Vec<&ResolvedSample> = batch.iter().map(|&i| &samples[i]).collect();
            let grads = model.batch_gradients(&refs)?;
            total += grads.loss;
            apply(model, grads, &mut state);
        }
        trajectory.push(total / samples.len() as f64);
    }
    Ok(trajectory)
}

/// Resolves content features (frozen) and trains the model.
pub fn train_ctr(
    model: &mut CtrModel,
    samples: &[BehaviorSample],
    lookup: &dyn MmLookup,
    queries: &dyn QueryFeatures,
) -> Result<Vec<f64>, CiubmError> {
    if samples.is_empty() {
        return Err(CiubmError::EmptyDataset);
    }
    let resolved = model.resolve_all(samples, lookup, queries)?;
    train_resolved(model, &resolved)
}

/// Scores resolved samples in parallel; output order matches input order.
pub fn predict(model: &CtrModel, samples: &[ResolvedSample]) -> Result<Vec<f64>, CiubmError> {
    samples.par_iter().map(|s| model.score(s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ciubm::{CtrConfig, CtrVariant, MmEntry};
    use crate::numerics::Optimizer;

    fn sample(label: u8, target: u64) -> ResolvedSample {
        let mm = |k: u64| Tensor::vector(vec![1.0 + k as f64, 0.5, -0.25]).unwrap();
        ResolvedSample {
            user_key: 1000,
            target_key: target,
            label,
            behaviors: vec![1, 2],
            behavior_mm: vec![Some(mm(1)), Some(mm(2))],
            target_mm: MmEntry {
                vector: mm(target),
                hit: true,
            },
            query: Tensor::vector(vec![0.3, -0.1]).unwrap(),
        }
    }

    fn model(opt: Optimizer, epochs: usize, batch: usize) -> CtrModel {
        let cfg = CtrConfig {
            d_id: 4,
            hidden: vec![6],
            epochs,
            batch_size: batch,
            optimizer: opt,
            ..CtrConfig::default()
        };
        CtrModel::new(cfg, CtrVariant::Mim, 3, 2)
    }

    #[test]
    fn single_positive_loss_decreases_monotonically() {
        let mut m = model(Optimizer::sgd(0.05), 50, 1);
        let curve = train_resolved(&mut m, &[sample(1, 7)]).unwrap();
        assert_eq!(curve.len(), 50);
        for w in curve.windows(2) {
            assert!(w[1] < w[0], "{curve:?}");
        }
    }

    #[test]
    fn identical_runs_give_identical_curves() {
        let data: Vec<ResolvedSample> = (0..40).map(|i| sample((i % 3 == 0) as u8, 5 + i % 4)).collect();
        let run = || {
            let mut m = model(Optimizer::adam(0.005), 3, 8);
            (train_resolved(&mut m, &data).unwrap(), m)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let data: Vec<ResolvedSample> = (0..70).map(|i| sample((i % 2) as u8, 5 + i % 5)).collect();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut m = model(Optimizer::adam(0.01), 2, 64);
                train_resolved(&mut m, &data).unwrap()
            })
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn rejects_empty_and_bad_labels() {
        let mut m = model(Optimizer::sgd(0.1), 1, 1);
        assert_eq!(train_resolved(&mut m, &[]).unwrap_err(), CiubmError::EmptyDataset);
        assert_eq!(
            train_resolved(&mut m, &[sample(2, 1)]).unwrap_err(),
            CiubmError::BadLabel(2)
        );
    }

    #[test]
    fn gradients_only_touch_used_ids() {
        let m = model(Optimizer::sgd(0.1), 1, 1);
        let s = sample(1, 9);
        let g = m.gradients(&[&s]).unwrap();
        let keys: Vec<u64> = g.ids.keys().copied().collect();
        assert_eq!(keys, vec![1, 2, 9, 1000]);
    }
}
