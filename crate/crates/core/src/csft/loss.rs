//! InfoNCE over cosine similarities and the three-level C-SFT objective.

use serde::{Deserialize, Serialize};

use super::{pool::Slot, CsftError, NegSamplingConfig, NegativePool, TrainingBatch};
use crate::encoders::{EncoderHead, HeadVars};
use crate::numerics::{NumericsError, Tape, Tensor, Var};

/// Which terms enter the InfoNCE denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Positive plus negatives; always non-negative.
    #[default]
    Standard,
    /// Negatives only, as the objective is sometimes written.
    NegativesOnly,
}

/// Weights on the text-level and image-level terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsftLossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for CsftLossWeights {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.5 }
    }
}

fn zero_norm(which: String) -> CsftError {
    CsftError::Numerics(NumericsError::ZeroNorm { op: "infonce", which })
}

/// `lse(logits[candidates]) - logits[pos]` where `logits = cos(rows, anchor) / τ`.
fn contrast(
    tape: &mut Tape,
    anchor: Var,
    rows: Var,
    pos: usize,
    tau: f64,
    variant: LossVariant,
) -> Result<Var, NumericsError> {
    let cos = tape.cosine_rows(rows, anchor)?;
    let logits = tape.scale(cos, 1.0 / tau)?;
    let denom = match variant {
        LossVariant::Standard => logits,
        LossVariant::NegativesOnly => {
            let n = tape.value(logits).len();
            let others: Vec<usize> = (0..n).filter(|&i| i != pos).collect();
            tape.gather(logits, &others)?
        }
    };
    let lse = tape.log_sum_exp(denom)?;
    let p = tape.pick(logits, pos)?;
    tape.sub(lse, p)
}

/// `-log(e^{s⁺/τ} / (e^{s⁺/τ} + Σ_j e^{s_j/τ}))` with cosine similarities;
/// the negatives-only variant drops the positive from the denominator.
pub fn infonce_var(
    tape: &mut Tape,
    anchor: Var,
    positive: Var,
    negatives: &[Var],
    tau: f64,
    variant: LossVariant,
) -> Result<Var, CsftError> {
    if !(tau > 0.0) {
        return Err(CsftError::BadTemperature(tau));
    }
    if tape.value(anchor).norm() == 0.0 {
        return Err(zero_norm("anchor".into()));
    }
    if tape.value(positive).norm() == 0.0 {
        return Err(zero_norm("positive".into()));
    }
    if let Some(j) = negatives.iter().position(|&n| tape.value(n).norm() == 0.0) {
        return Err(zero_norm(format!("negative {j}")));
    }
    let mut all = Vec::with_capacity(negatives.len() + 1);
    all.push(positive);
    all.extend_from_slice(negatives);
    let rows = tape.stack(&all)?;
    Ok(contrast(tape, anchor, rows, 0, tau, variant)?)
}

/// Plain-value InfoNCE.
pub fn infonce(
    anchor: &Tensor,
    positive: &Tensor,
    negatives: &[Tensor],
    tau: f64,
    variant: LossVariant,
) -> Result<f64, CsftError> {
    let mut tape = Tape::new();
    let a = tape.constant(anchor.clone());
    let p = tape.constant(positive.clone());
    let n: Vec<Var> = negatives.iter().map(|t| tape.constant(t.clone())).collect();
    let l = infonce_var(&mut tape, a, p, &n, tau, variant)?;
    Ok(tape.value(l).item())
}

/// Records one worker's multi-level loss
/// `L_q2item + α L_q2txt + β L_q2img`, each averaged over the worker's anchors.
///
/// The pool must already hold this step's batches from every worker. Entries
/// of this worker's newest batch are encoded live so they carry gradient;
/// everything else is a detached constant.
#[allow(clippy::too_many_arguments)]
pub(crate) fn worker_loss_var(
    tape: &mut Tape,
    vars: &HeadVars,
    batch: &TrainingBatch,
    pool: &NegativePool,
    worker: usize,
    weights: CsftLossWeights,
    cfg: &NegSamplingConfig,
    variant: LossVariant,
) -> Result<Var, CsftError> {
    if !(cfg.tau > 0.0) {
        return Err(CsftError::BadTemperature(cfg.tau));
    }
    let n = batch.queries.len();
    if n == 0 || batch.positives.len() != n || batch.hard_negatives.len() != n {
        return Err(CsftError::InvalidConfig(format!(
            "batch needs matching queries/positives/hard negatives, got {}/{}/{}",
            n,
            batch.positives.len(),
            batch.hard_negatives.len()
        )));
    }
    let newest = pool.get(super::PoolRef {
        worker,
        age: 0,
        slot: Slot::Positive(n - 1),
    });
    if newest.is_none() {
        return Err(CsftError::ColdPool(worker));
    }

    let mut live_pos = Vec::with_capacity(n);
    let mut live_neg = Vec::with_capacity(n);
    for (p, h) in batch.positives.iter().zip(&batch.hard_negatives) {
        let (pi, pt) = (tape.constant(p.image.clone()), tape.constant(p.text.clone()));
        live_pos.push(vars.encode_item(tape, pi, pt)?);
        if cfg.hard_negatives {
            let (hi, ht) = (tape.constant(h.image.clone()), tape.constant(h.text.clone()));
            live_neg.push(vars.encode_item(tape, hi, ht)?);
        }
    }
    let mut queries = Vec::with_capacity(n);
    for q in &batch.queries {
        let qv = tape.constant(q.clone());
        queries.push(vars.project_image(tape, qv)?);
    }

    let entries = pool.entries();
    let mut rows: [Vec<Var>; 3] = Default::default();
    let mut pos_index = vec![usize::MAX; n];
    for (idx, r) in entries.iter().enumerate() {
        let live = if r.worker == worker && r.age == 0 {
            match r.slot {
                Slot::Positive(i) => {
                    pos_index[i] = idx;
                    live_pos.get(i).copied()
                }
                Slot::HardNegative(i) => live_neg.get(i).copied(),
            }
        } else {
            None
        };
        let (mm, img, txt) = match live {
            Some(b) => (b.h_mm, b.h_img, b.h_txt),
            None => {
                let b = pool.get(*r).expect("entry listed by pool");
                (
                    tape.constant(b.h_mm.clone()),
                    tape.constant(b.h_img.clone()),
                    tape.constant(b.h_txt.clone()),
                )
            }
        };
        rows[0].push(mm);
        rows[1].push(txt);
        rows[2].push(img);
    }
    if pos_index.contains(&usize::MAX) {
        return Err(CsftError::InvalidConfig(
            "pool batch does not match the training batch".into(),
        ));
    }

    let level_weights = [1.0, weights.alpha, weights.beta];
    let mut total: Option<Var> = None;
    for (level, w) in level_weights.into_iter().enumerate() {
        if w == 0.0 && level > 0 {
            continue;
        }
        let stacked = tape.stack(&rows[level])?;
        let mut terms = Vec::with_capacity(n);
        for (r, &q) in queries.iter().enumerate() {
            terms.push(
                contrast(tape, q, stacked, pos_index[r], cfg.tau, variant).map_err(|e| rename_rows(e, &entries))?,
            );
        }
        let joined = tape.concat(&terms)?;
        let mean = tape.mean(joined)?;
        let weighted = if level == 0 { mean } else { tape.scale(mean, w)? };
        total = Some(match total {
            None => weighted,
            Some(t) => tape.add(t, weighted)?,
        });
    }
    Ok(total.expect("item level always present"))
}

fn rename_rows(e: NumericsError, entries: &[super::PoolRef]) -> CsftError {
    match e {
        NumericsError::ZeroNorm { which, .. } => {
            let named = match which.strip_prefix("row ").and_then(|r| r.parse::<usize>().ok()) {
                Some(r) => format!("candidate {:?}", entries[r]),
                None => "anchor".into(),
            };
            zero_norm(named)
        }
        other => CsftError::Numerics(other),
    }
}

/// Multi-level loss for one worker's batch against a pool that already holds it.
pub fn csft_loss(
    head: &EncoderHead,
    batch: &TrainingBatch,
    pool: &NegativePool,
    worker: usize,
    weights: CsftLossWeights,
    cfg: &NegSamplingConfig,
    variant: LossVariant,
) -> Result<f64, CsftError> {
    let mut tape = Tape::new();
    let vars = head.bind(&mut tape);
    let l = worker_loss_var(&mut tape, &vars, batch, pool, worker, weights, cfg, variant)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Tensor {
        Tensor::vector(xs.to_vec()).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_k_plus_one() {
        let a = v(&[1.0, 0.0]);
        let p = v(&[0.6, 0.8]);
        for k in [1usize, 3, 7, 1023] {
            let negs = vec![v(&[0.6, -0.8]); k];
            for tau in [0.1, 1.0, 3.0] {
                let l = infonce(&a, &p, &negs, tau, LossVariant::Standard).unwrap();
                assert!((l - ((k + 1) as f64).ln()).abs() < 1e-9, "k={k} tau={tau} {l}");
            }
        }
    }

    #[test]
    fn analytic_single_negative() {
        let l = infonce(
            &v(&[1.0, 0.0]),
            &v(&[2.0, 0.0]),
            &[v(&[0.0, 3.0])],
            1.0,
            LossVariant::Standard,
        )
        .unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-9);
        let lit = infonce(
            &v(&[1.0, 0.0]),
            &v(&[2.0, 0.0]),
            &[v(&[0.0, 3.0])],
            1.0,
            LossVariant::NegativesOnly,
        )
        .unwrap();
        assert!((lit - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_names_argument() {
        let z = v(&[0.0, 0.0]);
        let o = v(&[1.0, 0.0]);
        let msg = |r: Result<f64, CsftError>| r.unwrap_err().to_string();
        assert!(msg(infonce(&z, &o, std::slice::from_ref(&o), 1.0, LossVariant::Standard)).contains("anchor"));
        assert!(msg(infonce(&o, &z, std::slice::from_ref(&o), 1.0, LossVariant::Standard)).contains("positive"));
        assert!(msg(infonce(&o, &o, &[o.clone(), z], 1.0, LossVariant::Standard)).contains("negative 1"));
        assert!(matches!(
            infonce(&o, &o, &[], 0.0, LossVariant::Standard),
            Err(CsftError::BadTemperature(_))
        ));
    }

    #[test]
    fn detached_negative_changes_value_but_gets_no_gradient() {
        let run = |neg: f64| {
            let mut tape = Tape::new();
            let a = tape.leaf(v(&[1.0, 0.3]));
            let p = tape.leaf(v(&[0.5, 0.5]));
            let n = tape.constant(v(&[neg, 1.0]));
            let l = infonce_var(&mut tape, a, p, &[n], 0.5, LossVariant::Standard).unwrap();
            let g = tape.backward(l, &Tensor::scalar(1.0).unwrap()).unwrap();
            (tape.value(l).item(), g.get(n).is_none(), g.get(a).is_some())
        };
        let (l1, detached1, live1) = run(0.2);
        let (l2, detached2, _) = run(-0.7);
        assert_ne!(l1, l2);
        assert!(detached1 && detached2 && live1);
    }
}
