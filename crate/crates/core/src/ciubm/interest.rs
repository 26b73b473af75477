//! The three interest modules pooling a behavior sequence against a target.
//!
//! Tape versions take only the valid (unmasked) behavior rows; the plain
//! versions accept a mask and report weights at full sequence length.

use super::CiubmError;
use crate::numerics::{NumericsError, Tape, Tensor, Var};

/// Pooled interest vectors and content weights for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct InterestVector {
    pub h_b_id: Tensor,
    pub h_b_mm: Tensor,
    pub h_b_fusion: Tensor,
    /// Full-length content weights; masked positions are 0.
    pub alpha_mm: Tensor,
}

/// Scaled dot-product attention over behavior ID embeddings:
/// `softmax(h_t · h_i / √d)` weights, then the weighted sum. An empty
/// behavior list pools to the zero vector.
pub fn id_interest_var(tape: &mut Tape, target: Var, behaviors: &[Var]) -> Result<Var, NumericsError> {
    let d = tape.value(target).len();
    if behaviors.is_empty() {
        return Ok(tape.constant(Tensor::zeros(vec![d])));
    }
    let rows = tape.stack(behaviors)?;
    let logits = tape.matvec(rows, target)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax(logits)?;
    tape.weighted_sum(weights, rows)
}

/// Raw cosine weights `α_i = cos(h_t, h_i)` (not normalized across `i`) and
/// the pooled `Σ α_i h_i`. Returns `(alpha, pooled)`.
pub fn content_interest_var(tape: &mut Tape, target: Var, behaviors: &[Var]) -> Result<(Var, Var), NumericsError> {
    let d = tape.value(target).len();
    if behaviors.is_empty() {
        let alpha = tape.constant(Tensor::zeros(vec![0]));
        return Ok((alpha, tape.constant(Tensor::zeros(vec![d]))));
    }
    let rows = tape.stack(behaviors)?;
    let alpha = tape.cosine_rows(rows, target)?;
    let pooled = tape.weighted_sum(alpha, rows)?;
    Ok((alpha, pooled))
}

/// `Σ α_i h_i^ID` reusing the content weights on the ID embeddings.
pub fn fusion_interest_var(tape: &mut Tape, alpha: Var, behaviors: &[Var], d_id: usize) -> Result<Var, NumericsError> {
    let l = tape.value(alpha).len();
    if l != behaviors.len() {
        return Err(NumericsError::shape(
            "fusion_interest",
            format!("alpha length {l}, {} behaviors", behaviors.len()),
        ));
    }
    if behaviors.is_empty() {
        return Ok(tape.constant(Tensor::zeros(vec![d_id])));
    }
    let rows = tape.stack(behaviors)?;
    tape.weighted_sum(alpha, rows)
}

fn check_mask(len: usize, mask: &[bool]) -> Result<(), CiubmError> {
    if mask.len() != len {
        return Err(CiubmError::LengthMismatch {
            what: "mask",
            expected: len,
            got: mask.len(),
        });
    }
    Ok(())
}

fn valid<'a>(rows: &'a [Tensor], mask: &[bool]) -> Vec<&'a Tensor> {
    rows.iter().zip(mask).filter(|(_, &m)| m).map(|(r, _)| r).collect()
}

/// Plain ID interest. The flag is `true` when every position was masked.
pub fn id_interest(target: &Tensor, behaviors: &[Tensor], mask: &[bool]) -> Result<(Tensor, bool), CiubmError> {
    check_mask(behaviors.len(), mask)?;
    let mut tape = Tape::new();
    let t = tape.constant(target.clone());
    let rows: Vec<Var> = valid(behaviors, mask)
        .into_iter()
        .map(|r| tape.constant(r.clone()))
        .collect();
    let out = id_interest_var(&mut tape, t, &rows)?;
    Ok((tape.value(out).clone(), rows.is_empty()))
}

/// Plain content interest; returns full-length `alpha` (0 at masked slots) and
/// the pooled vector.
pub fn content_interest(target: &Tensor, behaviors: &[Tensor], mask: &[bool]) -> Result<(Tensor, Tensor), CiubmError> {
    check_mask(behaviors.len(), mask)?;
    let mut tape = Tape::new();
    let t = tape.constant(target.clone());
    let rows: Vec<Var> = valid(behaviors, mask)
        .into_iter()
        .map(|r| tape.constant(r.clone()))
        .collect();
    let (alpha, pooled) = content_interest_var(&mut tape, t, &rows)?;
    Ok((scatter(tape.value(alpha).data(), mask), tape.value(pooled).clone()))
}

/// Plain fusion interest over full-length `alpha` and ID embeddings.
pub fn fusion_interest(alpha: &Tensor, behaviors: &[Tensor], mask: &[bool], d_id: usize) -> Result<Tensor, CiubmError> {
    check_mask(behaviors.len(), mask)?;
    if alpha.len() != behaviors.len() {
        return Err(CiubmError::LengthMismatch {
            what: "alpha",
            expected: behaviors.len(),
            got: alpha.len(),
        });
    }
    let mut tape = Tape::new();
    let kept: Vec<f64> = alpha
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(a, _)| *a)
        .collect();
    let a = tape.constant(Tensor::from_parts(vec![kept.len()], kept));
    let rows: Vec<Var> = valid(behaviors, mask)
        .into_iter()
        .map(|r| tape.constant(r.clone()))
        .collect();
    let out = fusion_interest_var(&mut tape, a, &rows, d_id)?;
    Ok(tape.value(out).clone())
}

pub(crate) fn scatter(values: &[f64], mask: &[bool]) -> Tensor {
    let mut it = values.iter();
    let full: Vec<f64> = mask
        .iter()
        .map(|&m| {
            if m {
                *it.next().expect("one value per valid slot")
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_parts(vec![full.len()], full)
}
