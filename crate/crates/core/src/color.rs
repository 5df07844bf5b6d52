//! Floating-point RGB rasters in `[0, 1]`.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

/// Row-major, channel-interleaved RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ColorImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image {height}x{width}x3 with {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(height, width);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn map_pixels(&mut self, mut f: impl FnMut([f32; 3]) -> [f32; 3]) {
        for px in self.data.chunks_exact_mut(3) {
            let out = f([px[0], px[1], px[2]]);
            px.copy_from_slice(&out);
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = Self::new(self.height, self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(r, c, self.get(r, self.width - 1 - c));
            }
        }
        out
    }

    /// Bilinear resampling with half-pixel centres.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let mut out = Self::new(height, width);
        for r in 0..height {
            let fy = ((r as f32 + 0.5) * sy - 0.5).max(0.0);
            let y0 = (fy as usize).min(self.height - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for c in 0..width {
                let fx = ((c as f32 + 0.5) * sx - 0.5).max(0.0);
                let x0 = (fx as usize).min(self.width - 1);
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                let (a, b, cc, d) = (
                    self.get(y0, x0),
                    self.get(y0, x1),
                    self.get(y1, x0),
                    self.get(y1, x1),
                );
                let mut px = [0.0; 3];
                for k in 0..3 {
                    let top = a[k] * (1.0 - wx) + b[k] * wx;
                    let bottom = cc[k] * (1.0 - wx) + d[k] * wx;
                    px[k] = top * (1.0 - wy) + bottom * wy;
                }
                out.set(r, c, px);
            }
        }
        out
    }

    /// Sub-image copy; pixels outside `self` are filled with `pad`.
    pub fn crop(&self, top: isize, left: isize, height: usize, width: usize, pad: [f32; 3]) -> Self {
        let mut out = Self::filled(height, width, pad);
        for r in 0..height {
            let sr = top + r as isize;
            if sr < 0 || sr as usize >= self.height {
                continue;
            }
            for c in 0..width {
                let sc = left + c as isize;
                if sc < 0 || sc as usize >= self.width {
                    continue;
                }
                out.set(r, c, self.get(sr as usize, sc as usize));
            }
        }
        out
    }

    /// Channel-first `[3, H, W]` layout, the order the network consumes.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * 3];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for k in 0..3 {
                out[k * plane + i] = px[k];
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = self.get(y as usize, x as usize);
            Rgb(px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self {
            height: h as usize,
            width: w as usize,
            data,
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::image(path, e))?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::image(path, e))
    }
}
