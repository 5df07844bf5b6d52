//! The full segmentation network: pixel path, query decoder and heads.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::color::ColorImage;
use crate::decoder::{Decoder, DecoderConfig, QueryState};
use crate::error::{Error, Result};
use crate::heads::{semantic_output, Heads, PredictionSet};
use crate::mask::BinaryMask;
use crate::params::ParamStore;
use crate::pixel::{FeaturePyramid, PixelPath, EMBED_STRIDE, MAX_STRIDE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    pub skeleton_enabled: bool,
    /// Stride of the per-pixel embedding and so of the mask logits, 4 or 2.
    #[serde(default = "default_mask_stride")]
    pub mask_stride: usize,
}

fn default_mask_stride() -> usize {
    EMBED_STRIDE
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            decoder: DecoderConfig::default(),
            skeleton_enabled: true,
            mask_stride: EMBED_STRIDE,
        }
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub pixel: PixelPath,
    pub decoder: Decoder,
    pub heads: Heads,
}

pub struct ModelOutput {
    pub pyramid: FeaturePyramid,
    pub states: Vec<QueryState>,
    /// One per decoder layer plus the initial one.
    pub predictions: Vec<PredictionSet>,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.decoder.validate()?;
        let mut params = ParamStore::new(seed, dtype);
        let c = config.decoder.channel_dim;
        let pixel = PixelPath::new(&mut params.scope("pixel"), c, config.mask_stride)?;
        let decoder = Decoder::new(&mut params.scope("decoder"), &config.decoder)?;
        let heads = Heads::new(&mut params.scope("heads"), c, config.skeleton_enabled)?;
        Ok(Self {
            config: config.clone(),
            params,
            pixel,
            decoder,
            heads,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// `images` is channels-last `(B, H, W, 3)` with values in `[0, 1]`.
    pub fn forward(&self, images: &Tensor) -> Result<ModelOutput> {
        let pyramid = self.pixel.encode(images)?;
        let (states, predictions) = self.decoder.forward(&pyramid, &self.heads)?.into_iter().unzip();
        Ok(ModelOutput {
            pyramid,
            states,
            predictions,
        })
    }

    /// Stacks images of equal size into a `(B, H, W, 3)` tensor.
    pub fn batch_tensor(&self, images: &[&ColorImage]) -> Result<Tensor> {
        images_to_tensor(images, self.dtype(), self.device())
    }

    /// Binary text masks at input resolution.
    pub fn predict_masks(&self, images: &[&ColorImage]) -> Result<Vec<BinaryMask>> {
        let Some(first) = images.first() else {
            return Ok(Vec::new());
        };
        let (h, w) = first.dims();
        let out = self.forward(&self.batch_tensor(images)?)?;
        let last = out.predictions.last().expect("at least one prediction set");
        Ok(semantic_output(last, h, w)?.into_iter().map(|(_, m)| m).collect())
    }

    /// Binary text mask for one image of any size: the image is zero-padded at the bottom and
    /// right to a multiple of the largest stride and the prediction cropped back.
    pub fn predict_mask(&self, image: &ColorImage) -> Result<BinaryMask> {
        let (h, w) = image.dims();
        let up = |v: usize| v.div_ceil(MAX_STRIDE).max(1) * MAX_STRIDE;
        let (ph, pw) = (up(h), up(w));
        if (ph, pw) == (h, w) {
            return Ok(self.predict_masks(&[image])?.remove(0));
        }
        let padded = image.crop(0, 0, ph, pw, [0.0; 3]);
        Ok(self.predict_masks(&[&padded])?.remove(0).crop(0, 0, h, w))
    }

    pub fn save(&self, path: &Path, metadata: HashMap<String, String>) -> Result<()> {
        self.params.save(path, metadata)
    }

    pub fn load(&self, path: &Path) -> Result<HashMap<String, String>> {
        self.params.load(path)
    }
}

pub fn images_to_tensor(images: &[&ColorImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Shape("empty image batch".into()));
    };
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.dims() != (h, w) {
            return Err(Error::Shape(format!(
                "batch images differ in size: {:?} vs {:?}",
                img.dims(),
                (h, w)
            )));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::from_vec(data, (images.len(), h, w, 3), device)?.to_dtype(dtype)?)
}
