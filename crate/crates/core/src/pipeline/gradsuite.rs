//! Tape gradients of every differentiable block against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::ciubm::{
    content_interest_var, fusion_interest_var, id_interest_var, CtrConfig, CtrModel, CtrVariant, MmEntry,
    ResolvedSample,
};
use crate::csft::{
    infonce_var, worker_loss_var, CsftError, CsftLossWeights, LossVariant, NegSamplingConfig, NegativePool,
    PooledBatch, TrainingBatch,
};
use crate::encoders::{EncoderConfig, EncoderHead, Fusion, HeadVars, ItemFeatures};
use crate::numerics::{
    backward, finite_diff, forward, max_relative_error, Mlp, MlpVars, NumericsError, Optimizer, Tape, Tensor, Var,
};

pub const EPSILON: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub op: String,
    pub cases: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub const OPS: [&str; 9] = [
    "tfn_fuse",
    "mlp",
    "cosine",
    "infonce",
    "csft_loss",
    "id_interest",
    "content_interest",
    "fusion_interest",
    "deepctr",
];

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::from_parts(vec![n], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Max relative error of one scalar expression over its inputs.
fn compare<F, E>(expr: F, inputs: &[Tensor]) -> Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let rec = forward(&expr, inputs)?;
    let analytic = backward(&rec, &Tensor::from_parts(Vec::new(), vec![1.0]))?;
    let numeric = finite_diff(&expr, inputs, EPSILON)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Projects a vector output onto a fixed random direction.
fn project(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var, NumericsError> {
    let w = tape.constant(w.clone());
    tape.dot(out, w)
}

fn case(op: &str, rng: &mut ChaCha8Rng) -> Result<f64, PipelineError> {
    Ok(match op {
        "tfn_fuse" => {
            let (d1, d2) = (rng.random_range(1..5), rng.random_range(1..5));
            let w = rand_vec(rng, (d1 + 1) * (d2 + 1));
            let inputs = [rand_vec(rng, d1), rand_vec(rng, d2)];
            compare::<_, NumericsError>(
                |t, v| {
                    let o = t.outer_aug(v[0], v[1])?;
                    project(t, o, &w)
                },
                &inputs,
            )?
        }
        "mlp" => {
            let sizes = [rng.random_range(2..6), rng.random_range(2..6), rng.random_range(1..4)];
            let mlp = Mlp::init(&sizes, rng);
            let w = rand_vec(rng, sizes[2]);
            let mut inputs = vec![rand_vec(rng, sizes[0])];
            inputs.extend(mlp.params().into_iter().cloned());
            compare::<_, NumericsError>(
                |t, v| {
                    let vars = MlpVars {
                        params: v[1..].to_vec(),
                    };
                    let o = vars.forward(t, v[0])?;
                    project(t, o, &w)
                },
                &inputs,
            )?
        }
        "cosine" => {
            let d = rng.random_range(1..6);
            compare::<_, NumericsError>(|t, v| t.cosine(v[0], v[1]), &[rand_vec(rng, d), rand_vec(rng, d)])?
        }
        "infonce" => {
            let d = rng.random_range(2..6);
            let k = rng.random_range(1..5);
            let tau = rng.random_range(0.2..1.5);
            let variant = if rng.random_bool(0.5) {
                LossVariant::Standard
            } else {
                LossVariant::NegativesOnly
            };
            let inputs: Vec<Tensor> = (0..k + 2).map(|_| rand_vec(rng, d)).collect();
            compare::<_, CsftError>(|t, v| infonce_var(t, v[0], v[1], &v[2..], tau, variant), &inputs)?
        }
        "csft_loss" => csft_case(rng)?,
        "id_interest" => {
            let (d, l) = (rng.random_range(1..5), rng.random_range(1..5));
            let w = rand_vec(rng, d);
            let inputs: Vec<Tensor> = (0..=l).map(|_| rand_vec(rng, d)).collect();
            compare::<_, NumericsError>(
                |t, v| {
                    let o = id_interest_var(t, v[0], &v[1..])?;
                    project(t, o, &w)
                },
                &inputs,
            )?
        }
        "content_interest" => {
            let (d, l) = (rng.random_range(1..5), rng.random_range(1..5));
            let w = rand_vec(rng, d);
            let inputs: Vec<Tensor> = (0..=l).map(|_| rand_vec(rng, d)).collect();
            compare::<_, NumericsError>(
                |t, v| {
                    let (_, o) = content_interest_var(t, v[0], &v[1..])?;
                    project(t, o, &w)
                },
                &inputs,
            )?
        }
        "fusion_interest" => {
            let (d_mm, d_id, l) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
            let w = rand_vec(rng, d_id);
            // target mm, l behavior mm rows, l behavior id rows
            let mut inputs = vec![rand_vec(rng, d_mm)];
            inputs.extend((0..l).map(|_| rand_vec(rng, d_mm)));
            inputs.extend((0..l).map(|_| rand_vec(rng, d_id)));
            compare::<_, NumericsError>(
                |t, v| {
                    let (alpha, _) = content_interest_var(t, v[0], &v[1..=l])?;
                    let o = fusion_interest_var(t, alpha, &v[l + 1..], d_id)?;
                    project(t, o, &w)
                },
                &inputs,
            )?
        }
        "deepctr" => deepctr_case(rng)?,
        other => return Err(PipelineError::Invariant(format!("unknown op {other}"))),
    })
}

fn csft_case(rng: &mut ChaCha8Rng) -> Result<f64, PipelineError> {
    let fusion = if rng.random_bool(0.5) {
        Fusion::Tfn
    } else {
        Fusion::Concat
    };
    let head = EncoderHead::new(&EncoderConfig {
        d_img: 4,
        d_txt: 3,
        d_align: 3,
        d_mm: 3,
        hidden: vec![4],
        fusion,
        init_seed: rng.random(),
    });
    let cfg = NegSamplingConfig {
        batch_size: 2,
        k: 1,
        workers: 2,
        tau: rng.random_range(0.3..1.5),
        hard_negatives: rng.random_bool(0.5),
    };
    let weights = CsftLossWeights {
        alpha: rng.random_range(0.0..1.0),
        beta: rng.random_range(0.0..1.0),
    };
    let item = |rng: &mut ChaCha8Rng| ItemFeatures {
        key: rng.random(),
        image: rand_vec(rng, 4),
        text: rand_vec(rng, 3),
    };
    let batch = |rng: &mut ChaCha8Rng| TrainingBatch {
        queries: (0..2).map(|_| rand_vec(rng, 4)).collect(),
        positives: (0..2).map(|_| item(rng)).collect(),
        hard_negatives: (0..2).map(|_| item(rng)).collect(),
    };
    let detached = |b: &TrainingBatch| -> Result<PooledBatch, PipelineError> {
        let enc = |xs: &[ItemFeatures]| xs.iter().map(|f| head.encode_item(f)).collect::<Result<Vec<_>, _>>();
        Ok(PooledBatch {
            positives: enc(&b.positives)?,
            hard_negatives: enc(&b.hard_negatives)?,
        })
    };
    let mut pool = NegativePool::new(&cfg);
    let mut current = None;
    for step in 0..2 {
        for w in 0..2 {
            let b = batch(rng);
            pool.push(w, detached(&b)?)?;
            if step == 1 && w == 0 {
                current = Some(b);
            }
        }
    }
    let current = current.expect("worker 0 batch");
    let variant = if rng.random_bool(0.5) {
        LossVariant::Standard
    } else {
        LossVariant::NegativesOnly
    };
    let params: Vec<Tensor> = head.params().into_iter().cloned().collect();
    Ok(compare::<_, CsftError>(
        |t, v| {
            let vars = HeadVars::from_vars(v, fusion);
            worker_loss_var(t, &vars, &current, &pool, 0, weights, &cfg, variant)
        },
        &params,
    )?)
}

fn deepctr_case(rng: &mut ChaCha8Rng) -> Result<f64, PipelineError> {
    let variant = CtrVariant::ALL[rng.random_range(0..CtrVariant::ALL.len())];
    let cfg = CtrConfig {
        d_id: 3,
        hidden: vec![4],
        max_len: 4,
        optimizer: Optimizer::sgd(0.1),
        init_scale: 0.5,
        seed: rng.random(),
        ..CtrConfig::default()
    };
    let mut model = CtrModel::new(cfg, variant, 3, 2);
    let l = rng.random_range(1..5);
    let behaviors: Vec<u64> = (0..l as u64).map(|i| 100 + i).collect();
    let sample = ResolvedSample {
        user_key: 7,
        target_key: 50,
        label: u8::from(rng.random_bool(0.5)),
        behavior_mm: (0..l).map(|_| rng.random_bool(0.8).then(|| rand_vec(rng, 3))).collect(),
        behaviors,
        target_mm: MmEntry {
            vector: rand_vec(rng, 3),
            hit: rng.random_bool(0.9),
        },
        query: rand_vec(rng, 2),
    };
    let grads = model.gradients(&[&sample])?;
    let loss = |m: &CtrModel| -> Result<f64, PipelineError> { Ok(m.gradients(&[&sample])?.loss) };
    let mut worst: f64 = 0.0;
    for p in 0..grads.mlp.len() {
        for j in 0..grads.mlp[p].len() {
            let base = model.deepctr.params()[p].clone();
            let x = base.data()[j];
            *model.deepctr.params_mut()[p] = base.with_value(j, x + EPSILON);
            let up = loss(&model)?;
            *model.deepctr.params_mut()[p] = base.with_value(j, x - EPSILON);
            let down = loss(&model)?;
            *model.deepctr.params_mut()[p] = base;
            let numeric = (up - down) / (2.0 * EPSILON);
            worst = worst.max(crate::numerics::relative_error(grads.mlp[p][j], numeric));
        }
    }
    for (&key, g) in &grads.ids {
        for (j, &analytic) in g.iter().enumerate() {
            let base = model.id_table.get(key);
            let x = base.data()[j];
            *model.id_table.get_mut(key) = base.with_value(j, x + EPSILON);
            let up = loss(&model)?;
            *model.id_table.get_mut(key) = base.with_value(j, x - EPSILON);
            let down = loss(&model)?;
            *model.id_table.get_mut(key) = base;
            worst = worst.max(crate::numerics::relative_error(analytic, (up - down) / (2.0 * EPSILON)));
        }
    }
    Ok(worst)
}

/// Runs `cases` random cases of every op in [`OPS`].
pub fn gradient_suite(cases: usize, seed: u64) -> Result<Vec<GradCheck>, PipelineError> {
    OPS.iter()
        .enumerate()
        .map(|(i, &op)| {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::encoders::mix64(seed ^ i as u64));
            let mut worst: f64 = 0.0;
            for _ in 0..cases {
                worst = worst.max(case(op, &mut rng)?);
            }
            Ok(GradCheck {
                op: op.to_string(),
                cases,
                max_rel_error: worst,
            })
        })
        .collect()
}
