//! Image-text alignment of the two projection heads with a symmetric
//! in-batch contrastive objective.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EncoderError, EncoderHead, HeadVars, ItemFeatures};
use crate::numerics::{NumericsError, Optimizer, ParamState, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DmaConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for DmaConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            tau: 0.1,
            optimizer: Optimizer::adam(0.005),
            seed: 5,
        }
    }
}

/// Loss and gradients of one alignment step, gradients aligned with
/// [`EncoderHead::params`] (the MLP entries are zero).
#[derive(Debug, Clone)]
pub struct DmaStep {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

/// Records the symmetric loss `(L_img→txt + L_txt→img) / 2` over a batch of
/// projected pairs; row `r` of each side is the positive for row `r` of the other.
pub fn dma_loss_var(
    tape: &mut Tape,
    vars: &HeadVars,
    images: &[Var],
    texts: &[Var],
    tau: f64,
) -> Result<Var, NumericsError> {
    assert_eq!(images.len(), texts.len(), "unpaired batch");
    let img: Vec<Var> = images
        .iter()
        .map(|&x| vars.project_image(tape, x))
        .collect::<Result<_, _>>()?;
    let txt: Vec<Var> = texts
        .iter()
        .map(|&x| vars.project_text(tape, x))
        .collect::<Result<_, _>>()?;
    let img_rows = tape.stack(&img)?;
    let txt_rows = tape.stack(&txt)?;
    let mut terms = Vec::with_capacity(2 * img.len());
    for (rows, anchors) in [(txt_rows, &img), (img_rows, &txt)] {
        for (r, &anchor) in anchors.iter().enumerate() {
            let cos = tape.cosine_rows(rows, anchor)?;
            let logits = tape.scale(cos, 1.0 / tau)?;
            let lse = tape.log_sum_exp(logits)?;
            let pos = tape.pick(logits, r)?;
            terms.push(tape.sub(lse, pos)?);
        }
    }
    let all = tape.concat(&terms)?;
    tape.mean(all)
}

/// One symmetric contrastive step over matched `(image, text)` features.
pub fn dma_align_step(head: &EncoderHead, pairs: &[(Tensor, Tensor)], tau: f64) -> Result<DmaStep, EncoderError> {
    if !(tau > 0.0) {
        return Err(EncoderError::BadTemperature(tau));
    }
    if pairs.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    let mut tape = Tape::new();
    let vars = head.bind(&mut tape);
    let mut images = Vec::with_capacity(pairs.len());
    let mut texts = Vec::with_capacity(pairs.len());
    for (img, txt) in pairs {
        if img.shape() != [head.d_img()] || txt.shape() != [head.d_txt()] {
            return Err(EncoderError::DimMismatch {
                what: "alignment pair",
                expected: head.d_img(),
                got: img.len(),
            });
        }
        images.push(tape.constant(img.clone()));
        texts.push(tape.constant(txt.clone()));
    }
    let loss = dma_loss_var(&mut tape, &vars, &images, &texts, tau)?;
    let g = tape.backward(loss, &Tensor::from_parts(Vec::new(), vec![1.0]))?;
    Ok(DmaStep {
        loss: tape.value(loss).item(),
        grads: vars.all().into_iter().map(|v| g.wrt(&tape, v)).collect(),
    })
}

/// Mini-batch alignment training; returns the mean loss per epoch.
pub fn pretrain_dma(head: &mut EncoderHead, items: &[ItemFeatures], cfg: &DmaConfig) -> Result<Vec<f64>, EncoderError> {
    if items.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut states: Vec<ParamState> = Vec::new();
    let mut trajectory = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let pairs: Vec<(Tensor, Tensor)> = chunk
                .iter()
                .map(|&i| (items[i].image.clone(), items[i].text.clone()))
                .collect();
            let step = dma_align_step(head, &pairs, cfg.tau)?;
            cfg.optimizer.apply_all(head.params_mut(), &step.grads, &mut states);
            total += step.loss;
            batches += 1;
        }
        trajectory.push(total / batches as f64);
    }
    Ok(trajectory)
}
