use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EncoderError;
use crate::numerics::{outer_aug_values, Linear, Mlp, MlpVars, NumericsError, Tape, Tensor, Var};

/// How the two projected modalities are combined before the MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Augmented outer product `[h_img; 1] ⊗ [h_txt; 1]`.
    #[default]
    Tfn,
    /// Plain concatenation `[h_img; h_txt]` (ablation).
    Concat,
}

impl Fusion {
    pub fn output_dim(self, d1: usize, d2: usize) -> usize {
        match self {
            Fusion::Tfn => (d1 + 1) * (d2 + 1),
            Fusion::Concat => d1 + d2,
        }
    }
}

/// Dimensions and initialization of an [`EncoderHead`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_img: usize,
    pub d_txt: usize,
    /// Shared dimension both modalities are projected to.
    pub d_align: usize,
    pub d_mm: usize,
    pub hidden: Vec<usize>,
    pub fusion: Fusion,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_img: 32,
            d_txt: 32,
            d_align: 16,
            d_mm: 16,
            hidden: vec![64],
            fusion: Fusion::Tfn,
            init_seed: 11,
        }
    }
}

/// Per-item content features as delivered by the backbone stubs.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemFeatures {
    pub key: u64,
    pub image: Tensor,
    pub text: Tensor,
}

/// Projection heads for both modalities plus the fusion MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderHead {
    pub proj_img: Linear,
    pub proj_txt: Linear,
    pub fusion: Fusion,
    pub mlp: Mlp,
}

/// Output of one item encode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MMEmbeddingBundle {
    pub item_key: u64,
    pub h_mm: Tensor,
    pub h_img: Tensor,
    pub h_txt: Tensor,
}

/// Tape handles for a bound head.
#[derive(Debug, Clone)]
pub struct HeadVars {
    pub img_w: Var,
    pub img_b: Var,
    pub txt_w: Var,
    pub txt_b: Var,
    pub mlp: MlpVars,
    fusion: Fusion,
}

/// Tape handles for one encoded item.
#[derive(Debug, Clone, Copy)]
pub struct BundleVars {
    pub h_mm: Var,
    pub h_img: Var,
    pub h_txt: Var,
}

impl EncoderHead {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let proj_img = Linear::init(cfg.d_img, cfg.d_align, &mut rng);
        let proj_txt = Linear::init(cfg.d_txt, cfg.d_align, &mut rng);
        let mut sizes = vec![cfg.fusion.output_dim(cfg.d_align, cfg.d_align)];
        sizes.extend(&cfg.hidden);
        sizes.push(cfg.d_mm);
        let mlp = Mlp::init(&sizes, &mut rng);
        Self {
            proj_img,
            proj_txt,
            fusion: cfg.fusion,
            mlp,
        }
    }

    pub fn d_img(&self) -> usize {
        self.proj_img.fan_in()
    }

    pub fn d_txt(&self) -> usize {
        self.proj_txt.fan_in()
    }

    /// Post-projection dimension of the image branch.
    pub fn d_align_img(&self) -> usize {
        self.proj_img.fan_out()
    }

    pub fn d_align_txt(&self) -> usize {
        self.proj_txt.fan_out()
    }

    pub fn d_mm(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Checks the MLP input matches the fused width of the projections.
    pub fn validate(&self) -> Result<(), EncoderError> {
        let fused = self.fusion.output_dim(self.d_align_img(), self.d_align_txt());
        if self.mlp.input_dim() != fused {
            return Err(EncoderError::DimMismatch {
                what: "mlp input",
                expected: fused,
                got: self.mlp.input_dim(),
            });
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![
            &self.proj_img.weight,
            &self.proj_img.bias,
            &self.proj_txt.weight,
            &self.proj_txt.bias,
        ];
        p.extend(self.mlp.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![
            &mut self.proj_img.weight,
            &mut self.proj_img.bias,
            &mut self.proj_txt.weight,
            &mut self.proj_txt.bias,
        ];
        p.extend(self.mlp.params_mut());
        p
    }

    /// Registers all parameters as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> HeadVars {
        let img_w = tape.leaf(self.proj_img.weight.clone());
        let img_b = tape.leaf(self.proj_img.bias.clone());
        let txt_w = tape.leaf(self.proj_txt.weight.clone());
        let txt_b = tape.leaf(self.proj_txt.bias.clone());
        let mlp = self.mlp.bind(tape, true);
        HeadVars {
            img_w,
            img_b,
            txt_w,
            txt_b,
            mlp,
            fusion: self.fusion,
        }
    }

    fn check_dim(&self, what: &'static str, expected: usize, t: &Tensor) -> Result<(), EncoderError> {
        if t.shape() != [expected] {
            return Err(EncoderError::DimMismatch {
                what,
                expected,
                got: t.len(),
            });
        }
        Ok(())
    }

    /// Projects, fuses and refines one item's features.
    pub fn encode_item(&self, item: &ItemFeatures) -> Result<MMEmbeddingBundle, EncoderError> {
        self.check_dim("image feature", self.d_img(), &item.image)?;
        self.check_dim("text feature", self.d_txt(), &item.text)?;
        self.validate()?;
        let h_img = self.proj_img.apply(item.image.data());
        let h_txt = self.proj_txt.apply(item.text.data());
        let fused = match self.fusion {
            Fusion::Tfn => outer_aug_values(&h_img, &h_txt),
            Fusion::Concat => h_img.iter().chain(&h_txt).copied().collect(),
        };
        let h_mm = self.mlp.apply(&fused);
        let h_mm = Tensor::vector(h_mm).map_err(EncoderError::Numerics)?;
        Ok(MMEmbeddingBundle {
            item_key: item.key,
            h_mm,
            h_img: Tensor::from_parts(vec![h_img.len()], h_img),
            h_txt: Tensor::from_parts(vec![h_txt.len()], h_txt),
        })
    }

    /// Image-branch projection of a query feature.
    pub fn encode_query(&self, feature: &Tensor) -> Result<Tensor, EncoderError> {
        self.check_dim("query feature", self.d_img(), feature)?;
        Ok(Tensor::from_parts(
            vec![self.d_align_img()],
            self.proj_img.apply(feature.data()),
        ))
    }

    /// Per-item forward cost of the fusion step and MLP.
    pub fn fusion_flops(&self) -> u64 {
        match self.fusion {
            Fusion::Tfn => self.fusion.output_dim(self.d_align_img(), self.d_align_txt()) as u64,
            Fusion::Concat => 0,
        }
    }

    /// Versioned little-endian checkpoint: `"MIMH"`, u32 version, u8 fusion,
    /// u32 tensor count, then per tensor u32 rank, rank × u32 dims, f64 data.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(match self.fusion {
            Fusion::Tfn => 0,
            Fusion::Concat => 1,
        });
        let params = self.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
            for &d in p.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncoderError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(EncoderError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(EncoderError::Checkpoint(format!("unsupported version {version}")));
        }
        let fusion = match r.take(1)?[0] {
            0 => Fusion::Tfn,
            1 => Fusion::Concat,
            other => return Err(EncoderError::Checkpoint(format!("unknown fusion tag {other}"))),
        };
        let count = r.u32()? as usize;
        if count < 6 || !count.is_multiple_of(2) {
            return Err(EncoderError::Checkpoint(format!("bad tensor count {count}")));
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<_, _>>()?;
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| r.f64()).collect::<Result<_, _>>()?;
            tensors.push(Tensor::new(shape, data).map_err(EncoderError::Numerics)?);
        }
        if r.pos != bytes.len() {
            return Err(EncoderError::Checkpoint("trailing bytes".into()));
        }
        let mut it = tensors.into_iter();
        let linear = |it: &mut std::vec::IntoIter<Tensor>| -> Result<Linear, EncoderError> {
            let weight = it.next().expect("count checked");
            let bias = it.next().expect("count checked");
            match (weight.matrix_dims(), bias.shape()) {
                (Some((o, _)), [b]) if o == *b => Ok(Linear { weight, bias }),
                _ => Err(EncoderError::Checkpoint(format!(
                    "inconsistent layer shapes {:?} / {:?}",
                    weight.shape(),
                    bias.shape()
                ))),
            }
        };
        let proj_img = linear(&mut it)?;
        let proj_txt = linear(&mut it)?;
        let mut layers = Vec::new();
        while it.len() > 0 {
            layers.push(linear(&mut it)?);
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(EncoderError::Checkpoint("mlp layer widths do not chain".into()));
            }
        }
        let head = Self {
            proj_img,
            proj_txt,
            fusion,
            mlp: Mlp { layers },
        };
        head.validate()?;
        Ok(head)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MIMH";
const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EncoderError> {
        let end = self.pos + n;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| EncoderError::Checkpoint("truncated".into()))?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, EncoderError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, EncoderError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl HeadVars {
    /// Handles in [`HeadVars::all`] order.
    pub(crate) fn from_vars(vars: &[Var], fusion: Fusion) -> Self {
        Self {
            img_w: vars[0],
            img_b: vars[1],
            txt_w: vars[2],
            txt_b: vars[3],
            mlp: MlpVars {
                params: vars[4..].to_vec(),
            },
            fusion,
        }
    }

    pub fn project_image(&self, tape: &mut Tape, feature: Var) -> Result<Var, NumericsError> {
        tape.affine(self.img_w, feature, self.img_b)
    }

    pub fn project_text(&self, tape: &mut Tape, feature: Var) -> Result<Var, NumericsError> {
        tape.affine(self.txt_w, feature, self.txt_b)
    }

    pub fn encode_item(&self, tape: &mut Tape, image: Var, text: Var) -> Result<BundleVars, NumericsError> {
        let h_img = self.project_image(tape, image)?;
        let h_txt = self.project_text(tape, text)?;
        let fused = match self.fusion {
            Fusion::Tfn => tape.outer_aug(h_img, h_txt)?,
            Fusion::Concat => tape.concat(&[h_img, h_txt])?,
        };
        let h_mm = self.mlp.forward(tape, fused)?;
        Ok(BundleVars { h_mm, h_img, h_txt })
    }

    /// Parameter handles in [`EncoderHead::params`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.img_w, self.img_b, self.txt_w, self.txt_b];
        v.extend(&self.mlp.params);
        v
    }
}

/// Row-major flatten of `[h_img; 1] ⊗ [h_txt; 1]`, length `(d1 + 1)(d2 + 1)`.
pub fn tfn_fuse(h_img: &Tensor, h_txt: &Tensor) -> Result<Tensor, EncoderError> {
    for (what, t) in [("h_img", h_img), ("h_txt", h_txt)] {
        if t.shape().len() != 1 {
            return Err(EncoderError::Numerics(NumericsError::ShapeMismatch {
                op: "tfn_fuse",
                shapes: format!("{what} must be a vector, got {:?}", t.shape()),
            }));
        }
        if !t.is_finite() {
            return Err(EncoderError::Numerics(NumericsError::NonFinite {
                op: "tfn_fuse",
                index: 0,
            }));
        }
    }
    let out = outer_aug_values(h_img.data(), h_txt.data());
    Ok(Tensor::from_parts(vec![out.len()], out))
}
