//! Class, mask and skeleton heads, and semantic post-processing.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::nn::{resize_bilinear, softmax_last, Linear, Mlp};
use crate::params::{Init, Scope};

/// Index of the text class in the class logits; the last index is "no object".
pub const TEXT_CLASS: usize = 0;
pub const NO_OBJECT: usize = 1;
pub const NUM_CLASSES: usize = 2;

/// Per-query predictions for a batch. Mask and skeleton logits sit at the pixel-embedding
/// resolution.
#[derive(Clone, Debug)]
pub struct PredictionSet {
    /// `(B, N_q, 2)`
    pub class_logits: Tensor,
    /// `(B, N_q, h, w)`
    pub mask_logits: Tensor,
    /// Same shape as `mask_logits`; `None` when the skeleton head is disabled.
    pub skeleton_logits: Option<Tensor>,
}

impl PredictionSet {
    pub fn num_queries(&self) -> Result<usize> {
        Ok(self.class_logits.dim(1)?)
    }

    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.class_logits.dim(0)?)
    }

    /// Predictions of batch element `b`, keeping a leading batch axis of 1.
    pub fn select(&self, b: usize) -> Result<PredictionSet> {
        Ok(PredictionSet {
            class_logits: self.class_logits.narrow(0, b, 1)?,
            mask_logits: self.mask_logits.narrow(0, b, 1)?,
            skeleton_logits: self
                .skeleton_logits
                .as_ref()
                .map(|s| s.narrow(0, b, 1))
                .transpose()?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub class: Linear,
    pub mask_embed: Mlp,
    pub skeleton_embed: Option<Mlp>,
}

impl Heads {
    pub fn new(scope: &mut Scope<'_>, channels: usize, skeleton: bool) -> Result<Self> {
        let dims = [channels; 4];
        Ok(Self {
            class: Linear::new(scope, "class", channels, NUM_CLASSES, Init::xavier(channels, NUM_CLASSES))?,
            mask_embed: Mlp::new(scope, "mask_embed", &dims)?,
            skeleton_embed: if skeleton {
                Some(Mlp::new(scope, "skeleton_embed", &dims)?)
            } else {
                None
            },
        })
    }

    /// `query_embed` is `(B, N, C)`, `pixel_embedding` is `(B, h, w, C)`.
    pub fn predict(&self, query_embed: &Tensor, pixel_embedding: &Tensor) -> Result<PredictionSet> {
        let (b, n, c) = query_embed.dims3()?;
        let (pb, h, w, pc) = pixel_embedding.dims4()?;
        if pb != b || pc != c {
            return Err(Error::Shape(format!(
                "query embedding {:?} vs pixel embedding {:?}",
                query_embed.dims(),
                pixel_embedding.dims()
            )));
        }
        let pixels = pixel_embedding.reshape((b, h * w, c))?.t()?;
        let project = |mlp: &Mlp| -> Result<Tensor> {
            Ok(mlp.forward(query_embed)?.matmul(&pixels)?.reshape((b, n, h, w))?)
        };
        Ok(PredictionSet {
            class_logits: self.class.forward(query_embed)?,
            mask_logits: project(&self.mask_embed)?,
            skeleton_logits: self.skeleton_embed.as_ref().map(project).transpose()?,
        })
    }
}

/// Text probability at `(height, width)`: `Σ_q p_q(text) · sigmoid(mask_q)`, clamped to
/// `[0, 1]`. Mask logits are upsampled bilinearly before the sigmoid. Returns `(B, H, W)`.
pub fn semantic_probability(pred: &PredictionSet, height: usize, width: usize) -> Result<Tensor> {
    let p_text = softmax_last(&pred.class_logits)?.narrow(D::Minus1, TEXT_CLASS, 1)?; // (B, N, 1)
    let masks = candle_nn::ops::sigmoid(&resize_bilinear(&pred.mask_logits, height, width)?)?;
    let (b, n, _, _) = masks.dims4()?;
    let weighted = p_text
        .reshape((b, 1, n))?
        .matmul(&masks.reshape((b, n, height * width))?)?;
    Ok(weighted.reshape((b, height, width))?.clamp(0.0, 1.0)?)
}

/// Semantic output for each batch element: the probability map (row-major) and its
/// binarization at strictly greater than 0.5.
pub fn semantic_output(
    pred: &PredictionSet,
    height: usize,
    width: usize,
) -> Result<Vec<(Vec<f32>, BinaryMask)>> {
    let probs = semantic_probability(pred, height, width)?;
    let b = probs.dim(0)?;
    let flat = probs.to_dtype(DType::F32)?.reshape((b, height * width))?.to_vec2::<f32>()?;
    Ok(flat
        .into_iter()
        .map(|p| {
            let mask = BinaryMask::from_fn(height, width, |r, c| p[r * width + c] > 0.5);
            (p, mask)
        })
        .collect())
}
