use std::path::Path;

use serde::{Deserialize, Serialize};

use super::composite::{CompositeConfig, Compositor, Fill};
use super::font::FontInventory;
use super::raster::render_mask;
use super::scene::{sample_scene, Corpus, RenderScene, SceneConfig};
use crate::archive::{mix_seed, Archive, PhraseRecord, SampleMeta};
use crate::color::ColorImage;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::skeleton::zhang_suen_thin;

/// Scenes whose masks fall outside this foreground-ratio envelope are re-drawn.
pub const FG_RATIO_ENVELOPE: (f64, f64) = (0.0, 0.9);
const MAX_SCENE_ATTEMPTS: u64 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub canvas: (usize, usize),
    pub master_seed: u64,
    pub write_skeletons: bool,
    pub scene: SceneConfig,
    pub composite: CompositeConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            canvas: (128, 128),
            master_seed: 0,
            write_skeletons: true,
            scene: SceneConfig::default(),
            composite: CompositeConfig::default(),
        }
    }
}

/// One generated (image, mask) pair with its provenance.
#[derive(Clone, Debug)]
pub struct GeneratedSample {
    pub image: ColorImage,
    pub mask: BinaryMask,
    pub scene: RenderScene,
    pub meta: SampleMeta,
}

fn family(fill: &Fill) -> &'static str {
    match fill {
        Fill::Solid { .. } => "solid",
        Fill::Gradient { .. } => "gradient",
        Fill::Noise { .. } => "noise",
        Fill::Picture { .. } => "picture",
    }
}

/// Everything needed to synthesize samples.
pub struct Generator<'a> {
    pub corpus: &'a Corpus,
    pub fonts: &'a FontInventory,
    pub compositor: &'a Compositor,
    pub config: &'a GenerateConfig,
}

impl Generator<'_> {
    /// Generates sample `index`. Its RNG streams depend only on `(master_seed, index)`.
    pub fn sample(&self, index: usize) -> Result<GeneratedSample> {
        let seed = mix_seed(self.config.master_seed, index as u64);
        let (lo, hi) = FG_RATIO_ENVELOPE;
        let mut attempt = 0;
        let (scene, mask, scene_seed) = loop {
            let scene_seed = mix_seed(seed, 2 * attempt);
            let scene = sample_scene(
                self.corpus,
                self.fonts,
                self.config.canvas,
                scene_seed,
                &self.config.scene,
            )?;
            let mask = render_mask(&scene, self.fonts)?;
            let ratio = mask.foreground_ratio();
            attempt += 1;
            if (ratio > lo && ratio < hi) || attempt >= MAX_SCENE_ATTEMPTS {
                break (scene, mask, scene_seed);
            }
        };
        let style_seed = mix_seed(seed, 2 * attempt + 1);
        let (image, style) = self.compositor.composite(&mask, style_seed);
        let phrases = scene
            .phrases
            .iter()
            .map(|p| {
                Ok(PhraseRecord {
                    text: p.text.clone(),
                    font: self.fonts.get(p.font_id)?.name.clone(),
                    font_id: p.font_id,
                    rotation_deg: p.rotation_deg,
                    affine: p.affine,
                    anchor: p.anchor,
                    rendered_height: p.rendered_height,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = SampleMeta {
            index,
            seed,
            scene_seed,
            style_seed,
            phrases,
            foreground: family(&style.foreground).to_owned(),
            background: family(&style.background).to_owned(),
            foreground_ratio: mask.foreground_ratio(),
        };
        Ok(GeneratedSample {
            image,
            mask,
            scene,
            meta,
        })
    }
}

/// Writes `count` samples to `out` in the archive layout.
pub fn generate_dataset(
    count: usize,
    out: &Path,
    generator: &Generator<'_>,
) -> Result<Vec<SampleMeta>> {
    if count == 0 {
        return Err(Error::Config("sample count must be >= 1".into()));
    }
    let archive = Archive::create(out, generator.config.write_skeletons)?;
    let mut records = Vec::with_capacity(count);
    for index in 0..count {
        let sample = generator.sample(index)?;
        sample.image.save_png(archive.image_path(index))?;
        sample.mask.save_png(archive.mask_path(index))?;
        if generator.config.write_skeletons {
            zhang_suen_thin(&sample.mask).save_png(archive.skeleton_path(index))?;
        }
        records.push(sample.meta);
    }
    archive.write_meta(&records)?;
    Ok(records)
}
