//! Training samples, the held-out split and augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{mix_seed, Archive};
use crate::color::ColorImage;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::skeleton::zhang_suen_thin;

pub const SCALE_RANGE: (f64, f64) = (0.5, 2.0);
pub const COLOR_JITTER: f64 = 0.25;
const SPLIT_SALT: u64 = 0x511f_ca7e;
const PAD_COLOR: [f32; 3] = [0.0; 3];

/// Aligned image, mask and derived skeleton.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub index: usize,
    pub image: ColorImage,
    pub mask: BinaryMask,
    pub skeleton: BinaryMask,
}

impl SegSample {
    pub fn new(index: usize, image: ColorImage, mask: BinaryMask) -> Result<Self> {
        if image.dims() != mask.dims() {
            return Err(Error::Shape(format!(
                "sample {index}: image {:?} vs mask {:?}",
                image.dims(),
                mask.dims()
            )));
        }
        let skeleton = zhang_suen_thin(&mask);
        Ok(Self {
            index,
            image,
            mask,
            skeleton,
        })
    }

    /// Ground-truth masks in the mask-classification sense: the text region as a single
    /// mask, or nothing for a text-free image.
    pub fn gt_masks(&self) -> (Vec<BinaryMask>, Vec<BinaryMask>) {
        if self.mask.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            (vec![self.mask.clone()], vec![self.skeleton.clone()])
        }
    }
}

/// Loads every sample of an archive, optionally only the first `limit`.
pub fn load_archive(root: &std::path::Path, limit: Option<usize>) -> Result<Vec<SegSample>> {
    let archive = Archive::open(root)?;
    let mut indices = archive.indices()?;
    if let Some(n) = limit {
        indices.truncate(n);
    }
    if indices.is_empty() {
        return Err(Error::Config(format!("no samples in {}", root.display())));
    }
    indices
        .into_iter()
        .map(|i| SegSample::new(i, archive.load_image(i)?, archive.load_mask(i)?))
        .collect()
}

/// `true` when sample `index` belongs to the held-out split.
pub fn is_held_out(index: usize, val_fraction: f64) -> bool {
    let u = (mix_seed(SPLIT_SALT, index as u64) >> 11) as f64 / (1u64 << 53) as f64;
    u < val_fraction
}

/// `(train, held_out)` partition by index hash.
pub fn split(samples: &[SegSample], val_fraction: f64) -> (Vec<&SegSample>, Vec<&SegSample>) {
    samples.iter().partition(|s| !is_held_out(s.index, val_fraction))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub scale: f64,
    /// Multiplicative factors, 1 = unchanged.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Crop origin in the scaled image; negative values pad.
    pub top: isize,
    pub left: isize,
    pub flip: bool,
}

fn scaled_dims(dims: (usize, usize), scale: f64) -> (usize, usize) {
    let f = |v: usize| ((v as f64 * scale).round() as usize).max(1);
    (f(dims.0), f(dims.1))
}

fn crop_origin(size: usize, crop: usize, rng: &mut impl Rng) -> isize {
    let d = size as isize - crop as isize;
    let (lo, hi) = (d.min(0), d.max(0));
    rng.gen_range(lo..=hi)
}

impl AugmentParams {
    /// No scaling, no colour change, no flip, centred crop.
    pub fn identity(dims: (usize, usize), crop: usize) -> Self {
        Self {
            scale: 1.0,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            top: (dims.0 as isize - crop as isize) / 2,
            left: (dims.1 as isize - crop as isize) / 2,
            flip: false,
        }
    }

    pub fn sample(rng: &mut impl Rng, dims: (usize, usize), crop: usize) -> Self {
        let scale = rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        let mut jitter = || 1.0 + rng.gen_range(-COLOR_JITTER..=COLOR_JITTER);
        let (brightness, contrast, saturation) = (jitter(), jitter(), jitter());
        let (sh, sw) = scaled_dims(dims, scale);
        Self {
            scale,
            brightness,
            contrast,
            saturation,
            top: crop_origin(sh, crop, rng),
            left: crop_origin(sw, crop, rng),
            flip: rng.gen_bool(0.5),
        }
    }
}

fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn color_jitter(img: &mut ColorImage, p: &AugmentParams) {
    if p.brightness == 1.0 && p.contrast == 1.0 && p.saturation == 1.0 {
        return;
    }
    let (b, c, s) = (p.brightness as f32, p.contrast as f32, p.saturation as f32);
    img.map_pixels(|px| px.map(|v| (v * b).clamp(0.0, 1.0)));
    let n = (img.height() * img.width()) as f32;
    let mean = img.data().chunks_exact(3).map(|px| luma([px[0], px[1], px[2]])).sum::<f32>() / n;
    img.map_pixels(|px| px.map(|v| ((v - mean) * c + mean).clamp(0.0, 1.0)));
    img.map_pixels(|px| {
        let g = luma(px);
        px.map(|v| ((v - g) * s + g).clamp(0.0, 1.0))
    });
}

/// Applies explicit augmentation parameters and recomputes the skeleton.
pub fn apply_augment(sample: &SegSample, p: &AugmentParams, crop: usize) -> SegSample {
    let (sh, sw) = scaled_dims(sample.image.dims(), p.scale);
    let (mut image, mut mask) = if (sh, sw) == sample.image.dims() {
        (sample.image.clone(), sample.mask.clone())
    } else {
        (
            sample.image.resize_bilinear(sh, sw),
            sample.mask.resize_nearest(sh, sw),
        )
    };
    color_jitter(&mut image, p);
    if (p.top, p.left, crop, crop) != (0, 0, sh, sw) {
        image = image.crop(p.top, p.left, crop, crop, PAD_COLOR);
        mask = mask.crop(p.top, p.left, crop, crop);
    }
    if p.flip {
        image = image.flip_horizontal();
        mask = mask.flip_horizontal();
    }
    let skeleton = zhang_suen_thin(&mask);
    SegSample {
        index: sample.index,
        image,
        mask,
        skeleton,
    }
}

/// Random scale, colour jitter, crop and horizontal flip drawn from `seed`.
pub fn augment(sample: &SegSample, seed: u64, crop: usize) -> SegSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = AugmentParams::sample(&mut rng, sample.image.dims(), crop);
    apply_augment(sample, &p, crop)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SegSample {
        let mask = BinaryMask::from_fn(32, 32, |r, c| (8..20).contains(&r) && (4..12).contains(&c));
        let mut image = ColorImage::filled(32, 32, [0.2, 0.4, 0.6]);
        for r in 0..32 {
            for c in 0..32 {
                if mask.get(r, c) {
                    image.set(r, c, [0.9, 0.1, 0.1]);
                }
            }
        }
        SegSample::new(7, image, mask).unwrap()
    }

    #[test]
    fn identity_leaves_sample_unchanged() {
        let s = sample();
        let out = apply_augment(&s, &AugmentParams::identity((32, 32), 32), 32);
        assert_eq!(out, s);
    }

    #[test]
    fn flip_mirrors_mask() {
        let s = sample();
        let p = AugmentParams {
            flip: true,
            ..AugmentParams::identity((32, 32), 32)
        };
        let once = apply_augment(&s, &p, 32);
        assert_eq!(once.mask, s.mask.flip_horizontal());
        assert_eq!(apply_augment(&once, &p, 32).mask, s.mask);
    }

    #[test]
    fn random_augmentations_keep_skeleton_contract() {
        let s = sample();
        for seed in 0..100 {
            let a = augment(&s, seed, 32);
            assert_eq!(a.image.dims(), (32, 32));
            assert_eq!(a.skeleton, zhang_suen_thin(&a.mask));
        }
    }

    #[test]
    fn undersized_images_are_padded() {
        let s = sample();
        let p = AugmentParams {
            scale: 0.5,
            top: -8,
            left: -8,
            ..AugmentParams::identity((32, 32), 32)
        };
        let a = apply_augment(&s, &p, 32);
        assert_eq!(a.image.dims(), (32, 32));
        assert_eq!(a.image.get(0, 0), PAD_COLOR);
    }

    #[test]
    fn split_is_deterministic_and_roughly_sized() {
        let held: usize = (0..10_000).filter(|&i| is_held_out(i, 0.1)).count();
        assert!((800..1200).contains(&held));
        assert!((0..100).all(|i| is_held_out(i, 0.1) == is_held_out(i, 0.1)));
        assert_eq!((0..100).filter(|&i| is_held_out(i, 0.0)).count(), 0);
    }
}
