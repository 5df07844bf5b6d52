//! Procedural image synthesis for rendered masks: every foreground pixel receives the
//! foreground fill and every background pixel the background fill, so mask and image are
//! aligned exactly.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::ColorImage;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub const MIN_CONTRAST: f32 = 0.1;
const MAX_STYLE_ATTEMPTS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fill {
    Solid {
        color: [f32; 3],
    },
    Gradient {
        from: [f32; 3],
        to: [f32; 3],
        angle: f32,
    },
    /// Bilinearly interpolated value noise over a coarse lattice of colours.
    Noise {
        cell: usize,
        lattice_w: usize,
        lattice: Vec<[f32; 3]>,
    },
    /// Crop of a user-supplied background picture.
    Picture {
        index: usize,
        top: usize,
        left: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeStyle {
    pub foreground: Fill,
    pub background: Fill,
    /// Drop shadow cast onto background pixels: `(dx, dy, darkening)`.
    pub shadow: Option<(i32, i32, f32)>,
    /// Brightness factor applied to foreground pixels touching the background.
    pub edge_jitter: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositeConfig {
    pub shadow_prob: f64,
    pub edge_jitter_prob: f64,
    pub picture_prob: f64,
}

impl Default for CompositeConfig {
    fn default() -> Self {
        Self {
            shadow_prob: 0.3,
            edge_jitter_prob: 0.3,
            picture_prob: 0.5,
        }
    }
}

/// Fills masks with random foreground/background styles.
#[derive(Clone, Debug, Default)]
pub struct Compositor {
    pub config: CompositeConfig,
    backgrounds: Vec<ColorImage>,
}

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn lerp(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

impl Compositor {
    pub fn new(config: CompositeConfig) -> Self {
        Self {
            config,
            backgrounds: Vec::new(),
        }
    }

    /// Adds every PNG directly inside `dir` (file-name order) as a background picture.
    pub fn with_background_dir(mut self, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
            })
            .collect();
        paths.sort();
        for p in paths {
            self.backgrounds.push(ColorImage::load_png(&p)?);
        }
        Ok(self)
    }

    pub fn with_backgrounds(mut self, backgrounds: Vec<ColorImage>) -> Self {
        self.backgrounds = backgrounds;
        self
    }

    fn sample_fill(&self, rng: &mut impl Rng, dims: (usize, usize), allow_picture: bool) -> Fill {
        let (h, w) = dims;
        if allow_picture && !self.backgrounds.is_empty() && rng.gen_bool(self.config.picture_prob)
        {
            let index = rng.gen_range(0..self.backgrounds.len());
            let bg = &self.backgrounds[index];
            let (bh, bw) = self.picture_dims(bg, dims);
            return Fill::Picture {
                index,
                top: rng.gen_range(0..=bh - h),
                left: rng.gen_range(0..=bw - w),
            };
        }
        match rng.gen_range(0..3) {
            0 => Fill::Solid {
                color: random_color(rng),
            },
            1 => Fill::Gradient {
                from: random_color(rng),
                to: random_color(rng),
                angle: rng.gen_range(0.0..std::f32::consts::TAU),
            },
            _ => {
                let cell = rng.gen_range(4..=16);
                let lattice_h = h / cell + 2;
                let lattice_w = w / cell + 2;
                let base = random_color(rng);
                let amp: f32 = rng.gen_range(0.05..0.3);
                let lattice = (0..lattice_h * lattice_w)
                    .map(|_| {
                        base.map(|v| (v + amp * rng.gen_range(-1.0f32..1.0)).clamp(0.0, 1.0))
                    })
                    .collect();
                Fill::Noise {
                    cell,
                    lattice_w,
                    lattice,
                }
            }
        }
    }

    /// Size a background picture is scaled to so that it covers the canvas.
    fn picture_dims(&self, bg: &ColorImage, dims: (usize, usize)) -> (usize, usize) {
        let (h, w) = dims;
        let scale = (h as f64 / bg.height() as f64)
            .max(w as f64 / bg.width() as f64)
            .max(1.0);
        (
            ((bg.height() as f64 * scale).ceil() as usize).max(h),
            ((bg.width() as f64 * scale).ceil() as usize).max(w),
        )
    }

    fn paint(&self, fill: &Fill, dims: (usize, usize)) -> ColorImage {
        let (h, w) = dims;
        match fill {
            Fill::Solid { color } => ColorImage::filled(h, w, *color),
            Fill::Gradient { from, to, angle } => {
                let (s, c) = angle.sin_cos();
                let mut img = ColorImage::new(h, w);
                for r in 0..h {
                    for col in 0..w {
                        let u = (col as f32 + 0.5) / w as f32 - 0.5;
                        let v = (r as f32 + 0.5) / h as f32 - 0.5;
                        let t = (u * c + v * s + 0.5).clamp(0.0, 1.0);
                        img.set(r, col, lerp(*from, *to, t));
                    }
                }
                img
            }
            Fill::Noise {
                cell,
                lattice_w,
                lattice,
            } => {
                let mut img = ColorImage::new(h, w);
                let cell_f = *cell as f32;
                for r in 0..h {
                    let fy = r as f32 / cell_f;
                    let (gy, ty) = (fy as usize, fy.fract());
                    for col in 0..w {
                        let fx = col as f32 / cell_f;
                        let (gx, tx) = (fx as usize, fx.fract());
                        let at = |y: usize, x: usize| lattice[y * lattice_w + x];
                        let top = lerp(at(gy, gx), at(gy, gx + 1), tx);
                        let bottom = lerp(at(gy + 1, gx), at(gy + 1, gx + 1), tx);
                        img.set(r, col, lerp(top, bottom, ty));
                    }
                }
                img
            }
            Fill::Picture { index, top, left } => {
                let bg = &self.backgrounds[*index];
                let (bh, bw) = self.picture_dims(bg, dims);
                bg.resize_bilinear(bh, bw)
                    .crop(*top as isize, *left as isize, h, w, [0.0; 3])
            }
        }
    }

    pub fn sample_style(&self, rng: &mut impl Rng, dims: (usize, usize)) -> CompositeStyle {
        let foreground = self.sample_fill(rng, dims, false);
        let background = self.sample_fill(rng, dims, true);
        let shadow = rng.gen_bool(self.config.shadow_prob).then(|| {
            (
                rng.gen_range(1..=3) * if rng.gen() { 1 } else { -1 },
                rng.gen_range(1..=3) * if rng.gen() { 1 } else { -1 },
                rng.gen_range(0.3f32..0.7),
            )
        });
        let edge_jitter = rng
            .gen_bool(self.config.edge_jitter_prob)
            .then(|| rng.gen_range(0.8f32..1.0));
        CompositeStyle {
            foreground,
            background,
            shadow,
            edge_jitter,
        }
    }

    /// Renders `mask` with an explicit style.
    pub fn composite_with_style(&self, mask: &BinaryMask, style: &CompositeStyle) -> ColorImage {
        let dims = mask.dims();
        let (h, w) = dims;
        let fg = self.paint(&style.foreground, dims);
        let mut out = self.paint(&style.background, dims);
        if let Some((dx, dy, dark)) = style.shadow {
            for r in 0..h {
                for c in 0..w {
                    if !mask.get(r, c) && mask.get_or_bg(r as isize - dy as isize, c as isize - dx as isize)
                    {
                        out.set(r, c, out.get(r, c).map(|v| v * (1.0 - dark)));
                    }
                }
            }
        }
        for r in 0..h {
            for c in 0..w {
                if !mask.get(r, c) {
                    continue;
                }
                let mut px = fg.get(r, c);
                if let Some(factor) = style.edge_jitter {
                    let (ri, ci) = (r as isize, c as isize);
                    let on_edge = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                        .iter()
                        .any(|&(dr, dc)| !mask.get_or_bg(ri + dr, ci + dc));
                    if on_edge {
                        px = px.map(|v| v * factor);
                    }
                }
                out.set(r, c, px);
            }
        }
        out
    }

    /// Renders `mask` with a style drawn from `style_seed`, re-drawing until foreground and
    /// background differ by at least [`MIN_CONTRAST`] in mean colour.
    pub fn composite(&self, mask: &BinaryMask, style_seed: u64) -> (ColorImage, CompositeStyle) {
        let mut rng = ChaCha8Rng::seed_from_u64(style_seed);
        let dims = mask.dims();
        let mut style = self.sample_style(&mut rng, dims);
        for _ in 0..MAX_STYLE_ATTEMPTS {
            let img = self.composite_with_style(mask, &style);
            if region_contrast(&img, mask).is_none_or(|c| c >= MIN_CONTRAST) {
                return (img, style);
            }
            style = self.sample_style(&mut rng, dims);
        }
        // Out of attempts: a solid foreground on the far side of the background mean.
        let bg = self.paint(&style.background, dims);
        let mean = region_means(&bg, mask).1.unwrap_or([0.5; 3]);
        style.foreground = Fill::Solid {
            color: mean.map(|v| if v > 0.5 { 0.0 } else { 1.0 }),
        };
        style.edge_jitter = None;
        (self.composite_with_style(mask, &style), style)
    }
}

/// Mean colours over `(foreground, background)` pixels, `None` for an empty region.
pub fn region_means(img: &ColorImage, mask: &BinaryMask) -> (Option<[f32; 3]>, Option<[f32; 3]>) {
    let mut sums = [[0.0f64; 3]; 2];
    let mut counts = [0usize; 2];
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            let k = usize::from(!mask.get(r, c));
            let px = img.get(r, c);
            for ch in 0..3 {
                sums[k][ch] += px[ch] as f64;
            }
            counts[k] += 1;
        }
    }
    let mean = |k: usize| {
        (counts[k] > 0).then(|| sums[k].map(|s| (s / counts[k] as f64) as f32))
    };
    (mean(0), mean(1))
}

/// Mean absolute per-channel difference of the region mean colours; `None` unless both
/// regions are non-empty.
pub fn region_contrast(img: &ColorImage, mask: &BinaryMask) -> Option<f32> {
    match region_means(img, mask) {
        (Some(f), Some(b)) => Some((0..3).map(|k| (f[k] - b[k]).abs()).sum::<f32>() / 3.0),
        _ => None,
    }
}

/// Composite with the default configuration and no background pictures.
pub fn composite_image(mask: &BinaryMask, style_seed: u64) -> ColorImage {
    Compositor::default().composite(mask, style_seed).0
}
