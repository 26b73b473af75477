//! Analytic per-sample FLOP accounting.
//!
//! An affine map `m → n` costs `2mn`. Backward is modeled as twice the
//! forward, so a trainable component costs three forwards per training
//! sample and a frozen one costs one. `fom_cost` is the per-entity cost of
//! running the full content encoder online; a sample touches `l + 2`
//! entities (its behaviors, the target and the query). Within that budget
//! the fusion step and the head's affine layers are reported separately.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ciubm::{CtrModel, CtrVariant};
use crate::encoders::Fusion;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopVariant {
    Base,
    /// Multi-modal embeddings read from the representation center.
    Mim,
    /// Encoder run online, frozen during CTR training.
    MimNoRc,
    /// Encoder run online and trained end to end.
    MimE2e,
}

impl FlopVariant {
    pub const ALL: [FlopVariant; 4] = [
        FlopVariant::Base,
        FlopVariant::Mim,
        FlopVariant::MimNoRc,
        FlopVariant::MimE2e,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FlopVariant::Base => "base",
            FlopVariant::Mim => "mim",
            FlopVariant::MimNoRc => "mim_no_rc",
            FlopVariant::MimE2e => "mim_e2e",
        }
    }
}

/// Model dimensions that determine the counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopDims {
    /// Behavior length `l`.
    pub behaviors: usize,
    pub d_id: usize,
    pub d_mm: usize,
    /// Raw query feature width fed to the CTR head.
    pub d_query: usize,
    pub deepctr_hidden: Vec<usize>,
    pub d_img: usize,
    pub d_txt: usize,
    pub d_align: usize,
    pub encoder_hidden: Vec<usize>,
    pub fusion: Fusion,
    /// Per-entity cost of online encoding.
    pub fom_cost: u64,
}

/// Per-component counts for one phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopParts {
    pub encoder_fom: u64,
    pub tfn: u64,
    pub mlp: u64,
    pub attention: u64,
    pub deepctr: u64,
    pub lookup: u64,
}

impl FlopParts {
    pub fn total(&self) -> u64 {
        self.encoder_fom + self.tfn + self.mlp + self.attention + self.deepctr + self.lookup
    }

    fn scaled(self, k: u64) -> Self {
        Self {
            encoder_fom: self.encoder_fom * k,
            tfn: self.tfn * k,
            mlp: self.mlp * k,
            attention: self.attention * k,
            deepctr: self.deepctr * k,
            lookup: self.lookup * k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopLedger {
    pub variant: FlopVariant,
    pub inference: FlopParts,
    pub training: FlopParts,
}

pub fn affine_flops(m: usize, n: usize) -> u64 {
    2 * m as u64 * n as u64
}

/// Cost of each affine layer in a chain of sizes.
pub fn layer_flops(sizes: &[usize]) -> Vec<u64> {
    sizes.windows(2).map(|w| affine_flops(w[0], w[1])).collect()
}

fn ctr_variant(v: FlopVariant) -> CtrVariant {
    match v {
        FlopVariant::Base => CtrVariant::Base,
        _ => CtrVariant::Mim,
    }
}

/// Pooling cost: ID attention `l(4d_id + 4)` (dots, scaling, softmax, weighted
/// sum); content `l(6d_mm + 2) + 2d_mm` (cosines and weighted sum); fusion `2l·d_id`.
pub fn attention_flops(variant: CtrVariant, l: usize, d_id: usize, d_mm: usize) -> u64 {
    let (l, d_id, d_mm) = (l as u64, d_id as u64, d_mm as u64);
    let (id, content, fusion) = variant.blocks();
    let mut total = 0;
    if id {
        total += l * (4 * d_id + 4);
    }
    if content || fusion {
        total += l * (6 * d_mm + 2) + 2 * d_mm;
    }
    if fusion {
        total += 2 * l * d_id;
    }
    total
}

pub fn deepctr_flops(variant: CtrVariant, dims: &FlopDims) -> u64 {
    let mut sizes = vec![CtrModel::input_dim_for(variant, dims.d_id, dims.d_mm, dims.d_query)];
    sizes.extend(&dims.deepctr_hidden);
    sizes.push(1);
    layer_flops(&sizes).iter().sum()
}

/// `(tfn, head affine)` forward cost of encoding one item.
fn head_item_flops(dims: &FlopDims) -> (u64, u64) {
    let fused = dims.fusion.output_dim(dims.d_align, dims.d_align);
    let tfn = match dims.fusion {
        Fusion::Tfn => fused as u64,
        Fusion::Concat => 0,
    };
    let mut sizes = vec![fused];
    sizes.extend(&dims.encoder_hidden);
    sizes.push(dims.d_mm);
    let mlp = layer_flops(&sizes).iter().sum::<u64>()
        + affine_flops(dims.d_img, dims.d_align)
        + affine_flops(dims.d_txt, dims.d_align);
    (tfn, mlp)
}

/// Online encoder cost for one sample, split so the three fields sum to
/// exactly `fom_cost · (l + 2)`.
fn encoder_parts(dims: &FlopDims) -> FlopParts {
    let entities = dims.behaviors as u64 + 2;
    let budget = dims.fom_cost * entities;
    let (tfn_item, mlp_item) = head_item_flops(dims);
    let items = entities - 1;
    let query_proj = affine_flops(dims.d_img, dims.d_align);
    let tfn = (tfn_item * items).min(budget);
    let mlp = (mlp_item * items + query_proj).min(budget - tfn);
    FlopParts {
        encoder_fom: budget - tfn - mlp,
        tfn,
        mlp,
        ..FlopParts::default()
    }
}

pub fn flop_account(variant: FlopVariant, dims: &FlopDims) -> FlopLedger {
    let cv = ctr_variant(variant);
    let ctr = FlopParts {
        attention: attention_flops(cv, dims.behaviors, dims.d_id, dims.d_mm),
        deepctr: deepctr_flops(cv, dims),
        lookup: 0,
        ..FlopParts::default()
    };
    let encoder = match variant {
        FlopVariant::Base | FlopVariant::Mim => FlopParts::default(),
        FlopVariant::MimNoRc | FlopVariant::MimE2e => encoder_parts(dims),
    };
    let add = |a: FlopParts, b: FlopParts| FlopParts {
        encoder_fom: a.encoder_fom + b.encoder_fom,
        tfn: a.tfn + b.tfn,
        mlp: a.mlp + b.mlp,
        attention: a.attention + b.attention,
        deepctr: a.deepctr + b.deepctr,
        lookup: a.lookup + b.lookup,
    };
    let encoder_train = match variant {
        FlopVariant::MimE2e => encoder.scaled(3),
        _ => encoder,
    };
    FlopLedger {
        variant,
        inference: add(ctr, encoder),
        training: add(ctr.scaled(3), encoder_train),
    }
}

/// Ledger for every variant, in [`FlopVariant::ALL`] order.
pub fn flop_table(dims: &FlopDims) -> Vec<FlopLedger> {
    FlopVariant::ALL.iter().map(|&v| flop_account(v, dims)).collect()
}

/// Aligned plain-text rendering, one row per variant and phase.
pub fn render_flop_table(rows: &[FlopLedger]) -> String {
    let header = [
        "variant",
        "phase",
        "encoder_fom",
        "tfn",
        "mlp",
        "attention",
        "deepctr",
        "lookup",
        "total",
    ];
    let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in rows {
        for (phase, p) in [("inference", r.inference), ("training", r.training)] {
            cells.push(vec![
                r.variant.name().to_string(),
                phase.to_string(),
                p.encoder_fom.to_string(),
                p.tfn.to_string(),
                p.mlp.to_string(),
                p.attention.to_string(),
                p.deepctr.to_string(),
                p.lookup.to_string(),
                p.total().to_string(),
            ]);
        }
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        for (c, cell) in row.iter().enumerate() {
            if c < 2 {
                let _ = write!(out, "{cell:<w$}", w = widths[c]);
            } else {
                let _ = write!(out, "{cell:>w$}", w = widths[c]);
            }
            if c + 1 < row.len() {
                out.push_str("  ");
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(fom: u64) -> FlopDims {
        FlopDims {
            behaviors: 16,
            d_id: 16,
            d_mm: 16,
            d_query: 32,
            deepctr_hidden: vec![64, 32],
            d_img: 32,
            d_txt: 32,
            d_align: 16,
            encoder_hidden: vec![64],
            fusion: Fusion::Tfn,
            fom_cost: fom,
        }
    }

    #[test]
    fn rc_removes_exactly_the_encoder_cost() {
        for fom in [1, 10_000, 5_000_000_000] {
            let d = dims(fom);
            let mim = flop_account(FlopVariant::Mim, &d);
            let no_rc = flop_account(FlopVariant::MimNoRc, &d);
            assert_eq!(no_rc.inference.total() - mim.inference.total(), fom * 18);
            assert_eq!(
                no_rc.inference.total(),
                flop_account(FlopVariant::MimE2e, &d).inference.total()
            );
        }
    }

    #[test]
    fn training_order() {
        for fom in [1, 1000, 1 << 32] {
            let t: Vec<u64> = flop_table(&dims(fom)).iter().map(|l| l.training.total()).collect();
            assert!(t[0] < t[1] && t[1] < t[2] && t[2] < t[3], "{t:?}");
        }
    }

    #[test]
    fn mim_delta_is_attention_and_wider_head() {
        let d = dims(1_000_000);
        let base = flop_account(FlopVariant::Base, &d).inference;
        let mim = flop_account(FlopVariant::Mim, &d).inference;
        assert_eq!(mim.encoder_fom + mim.tfn + mim.mlp + mim.lookup, 0);
        let delta = mim.total() - base.total();
        assert_eq!(delta, (mim.attention - base.attention) + (mim.deepctr - base.deepctr));
    }

    #[test]
    fn two_mn_rule() {
        assert_eq!(layer_flops(&[8, 4]), vec![64]);
        let d = FlopDims {
            behaviors: 0,
            d_id: 1,
            d_mm: 1,
            d_query: 3,
            deepctr_hidden: vec![4],
            ..dims(1)
        };
        // base input: d_id pooled + user d_id + query 3 + target d_id + d_mm + miss bit = 8
        assert_eq!(CtrModel::input_dim_for(CtrVariant::Base, 1, 1, 3), 8);
        assert_eq!(deepctr_flops(CtrVariant::Base, &d), 64 + 8);
        assert_eq!(attention_flops(CtrVariant::Base, 0, 1, 1), 0);
    }

    #[test]
    fn table_renders_all_rows() {
        let text = render_flop_table(&flop_table(&dims(100)));
        assert_eq!(text.lines().count(), 1 + 8);
        assert!(text.lines().next().unwrap().starts_with("variant"));
    }
}
