//! Small strided convolutional encoder with a top-down fusion path.
//!
//! Produces three decoder feature levels at strides 32, 16 and 8 (lowest resolution first)
//! and a per-pixel embedding at stride 4, or at stride 2 with one more fusion step.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{upsample2_nhwc, Conv2d};
use crate::params::Scope;

/// Total downsampling of the coarsest level.
pub const MAX_STRIDE: usize = 32;
/// Default stride of the per-pixel embedding.
pub const EMBED_STRIDE: usize = 4;
pub const EMBED_STRIDES: [usize; 2] = [2, 4];
pub const NUM_LEVELS: usize = 3;

/// Multi-resolution features for one batch. Every tensor is channels-last, `(B, h, w, C)`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    /// Strides 32, 16, 8 in that order.
    pub levels: Vec<Tensor>,
    /// Stride 4 or 2.
    pub pixel_embedding: Tensor,
    pub channel_dim: usize,
}

impl FeaturePyramid {
    pub fn level_hw(&self, l: usize) -> Result<(usize, usize)> {
        let (_, h, w, _) = self.levels[l].dims4()?;
        Ok((h, w))
    }

    pub fn embedding_hw(&self) -> Result<(usize, usize)> {
        let (_, h, w, _) = self.pixel_embedding.dims4()?;
        Ok((h, w))
    }

    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.pixel_embedding.dim(0)?)
    }
}

struct Stage {
    down: Conv2d,
    refine: Option<Conv2d>,
}

impl Stage {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.down.forward(x)?.relu()?;
        if let Some(r) = &self.refine {
            h = r.forward(&h)?.relu()?;
        }
        Ok(h)
    }
}

pub struct PixelPath {
    stages: Vec<Stage>,
    laterals: Vec<Conv2d>,
    outputs: Vec<Conv2d>,
    embed_hidden: Conv2d,
    embed_out: Conv2d,
    channels: usize,
    embed_stride: usize,
}

/// Stage widths for strides 2, 4, 8, 16, 32.
fn stage_widths(c: usize) -> [usize; 5] {
    let quarter = (c / 4).max(1);
    let half = (c / 2).max(1);
    [quarter, half, c, c, c]
}

impl PixelPath {
    pub fn new(scope: &mut Scope<'_>, channels: usize, embed_stride: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("channel dimension must be >= 1".into()));
        }
        if !EMBED_STRIDES.contains(&embed_stride) {
            return Err(Error::Config(format!("embedding stride must be 2 or 4, got {embed_stride}")));
        }
        let widths = stage_widths(channels);
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (i, &w) in widths.iter().enumerate() {
            let mut s = scope.scope(&format!("stage{i}"));
            stages.push(Stage {
                down: Conv2d::new(&mut s, "down", c_in, w, 3, 2)?,
                refine: if i >= 1 {
                    Some(Conv2d::new(&mut s, "refine", w, w, 3, 1)?)
                } else {
                    None
                },
            });
            c_in = w;
        }
        // laterals for strides 4, 8, 16, 32, then 2 if needed
        let first = if embed_stride == 2 { 0 } else { 1 };
        let mut laterals = (1..5)
            .map(|i| Conv2d::new(&mut scope.scope("lateral"), &format!("{i}"), widths[i], channels, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        if first == 0 {
            laterals.push(Conv2d::new(&mut scope.scope("lateral"), "0", widths[0], channels, 1, 1)?);
        }
        let outputs = (0..NUM_LEVELS)
            .map(|i| Conv2d::new(&mut scope.scope("level"), &format!("{i}"), channels, channels, 3, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stages,
            laterals,
            outputs,
            embed_hidden: Conv2d::new(scope, "embed_hidden", channels, channels, 3, 1)?,
            embed_out: Conv2d::new(scope, "embed_out", channels, channels, 1, 1)?,
            channels,
            embed_stride,
        })
    }

    pub fn embed_stride(&self) -> usize {
        self.embed_stride
    }

    /// Encodes a channels-last `(B, H, W, 3)` batch. `H` and `W` must be multiples of 32.
    pub fn encode(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let (_, h, w, c) = images.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        if h == 0 || w == 0 || h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "image size {h}x{w} is not a positive multiple of {MAX_STRIDE}"
            )));
        }
        let mut feats = Vec::with_capacity(5);
        let mut x = images.clone();
        for stage in &self.stages {
            x = stage.forward(&x)?;
            feats.push(x.clone());
        }
        // top-down: stride 32 -> 4
        let mut fused: Vec<Tensor> = Vec::with_capacity(4);
        let mut top = self.laterals[3].forward(&feats[4])?;
        fused.push(top.clone());
        for i in (0..3).rev() {
            let lat = self.laterals[i].forward(&feats[i + 1])?;
            top = (lat + upsample2_nhwc(&top)?)?;
            fused.push(top.clone());
        }
        if self.embed_stride == 2 {
            top = (self.laterals[4].forward(&feats[0])? + upsample2_nhwc(&top)?)?;
        }
        // fused = [s32, s16, s8, s4]
        let levels = (0..NUM_LEVELS)
            .map(|i| Ok(self.outputs[i].forward(&fused[i])?.relu()?))
            .collect::<Result<Vec<_>>>()?;
        let pixel_embedding = self.embed_out.forward(&self.embed_hidden.forward(&top)?.relu()?)?;
        Ok(FeaturePyramid {
            levels,
            pixel_embedding,
            channel_dim: self.channels,
        })
    }
}
