//! Binary foreground maps: labels, predictions and skeletons all share this type.

use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};

/// A 2-D boolean grid stored row-major. `true` marks foreground (text).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "BinaryMask {}x{} ({} fg)",
            self.height,
            self.width,
            self.count()
        )?;
        if self.height * self.width <= 32 * 32 {
            write!(f, "\n{}", self.to_ascii())?;
        }
        Ok(())
    }
}

impl BinaryMask {
    /// All-background mask. Panics on a zero dimension.
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "mask dimensions must be >= 1");
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("mask dimensions {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut mask = Self::new(height, width);
        for r in 0..height {
            for c in 0..width {
                mask.data[r * width + c] = f(r, c);
            }
        }
        mask
    }

    /// Parses rows of `1`/`#` (foreground) and `0`/`.` (background). Blank lines are skipped.
    pub fn from_ascii(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect();
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        let mut data = Vec::with_capacity(height * width);
        for row in &rows {
            if row.chars().count() != width {
                return Err(Error::Shape("ragged ascii mask".into()));
            }
            for ch in row.chars() {
                match ch {
                    '1' | '#' => data.push(true),
                    '0' | '.' => data.push(false),
                    other => return Err(Error::Shape(format!("bad mask character {other:?}"))),
                }
            }
        }
        Self::from_vec(height, width, data)
    }

    pub fn to_ascii(&self) -> String {
        let mut out = String::with_capacity(self.height * (self.width + 1));
        for r in 0..self.height {
            for c in 0..self.width {
                out.push(if self.get(r, c) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
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

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    /// Out-of-grid coordinates read as background.
    #[inline]
    pub fn get_or_bg(&self, row: isize, col: isize) -> bool {
        if row < 0 || col < 0 || row as usize >= self.height || col as usize >= self.width {
            false
        } else {
            self.data[row as usize * self.width + col as usize]
        }
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn foreground_ratio(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// `true` when every foreground pixel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    /// Nearest-neighbour resampling with half-pixel centres.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Self::from_fn(height, width, |r, c| {
            let src_r = (((r as f64 + 0.5) * sy) as usize).min(self.height - 1);
            let src_c = (((c as f64 + 0.5) * sx) as usize).min(self.width - 1);
            self.get(src_r, src_c)
        })
    }

    /// Sub-grid copy; regions outside `self` read as background.
    pub fn crop(&self, top: isize, left: isize, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |r, c| {
            self.get_or_bg(top + r as isize, left + c as isize)
        })
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Pixels above 127 are foreground.
    pub fn from_gray_image(img: &GrayImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let data = img.pixels().map(|p| p.0[0] > 127).collect();
        Self::from_vec(h as usize, w as usize, data)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::image(path, e))?;
        Self::from_gray_image(&img.to_luma8())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_gray_image()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::image(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths() {
        assert!(BinaryMask::from_vec(2, 2, vec![true; 3]).is_err());
        assert!(BinaryMask::from_vec(0, 2, vec![]).is_err());
    }

    #[test]
    fn ascii_round_trip() {
        let text = "0110\n1001\n";
        let m = BinaryMask::from_ascii(text).unwrap();
        assert_eq!(m.dims(), (2, 4));
        assert_eq!(m.count(), 4);
        assert_eq!(m.to_ascii(), text);
    }

    #[test]
    fn flip_is_involution() {
        let m = BinaryMask::from_ascii("1100\n0010").unwrap();
        assert_eq!(m.flip_horizontal().to_ascii(), "0011\n0100\n");
        assert_eq!(m.flip_horizontal().flip_horizontal(), m);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = BinaryMask::from_fn(5, 7, |r, c| (r + c) % 3 == 0);
        m.save_png(&path).unwrap();
        assert_eq!(BinaryMask::load_png(&path).unwrap(), m);
    }

    #[test]
    fn crop_pads_with_background() {
        let m = BinaryMask::from_fn(2, 2, |_, _| true);
        let c = m.crop(-1, -1, 4, 4);
        assert_eq!(c.count(), 4);
        assert!(c.get(1, 1) && !c.get(0, 0) && !c.get(3, 3));
    }
}
