use std::path::{Path, PathBuf};

use ab_glyph::{point, Font, FontVec, PxScale, ScaleFont};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Glyph coverage at or above this level becomes foreground.
const COVERAGE_THRESHOLD: f32 = 0.5;

pub struct LoadedFont {
    pub name: String,
    pub path: PathBuf,
    font: FontVec,
}

impl std::fmt::Debug for LoadedFont {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LoadedFont")
            .field("name", &self.name)
            .field("path", &self.path)
            .finish()
    }
}

/// The fonts available to the renderer, indexed by position in file-name order.
#[derive(Debug, Default)]
pub struct FontInventory {
    fonts: Vec<LoadedFont>,
}

impl FontInventory {
    /// Loads every `.ttf`/`.otf` file directly inside `dir`, sorted by file name.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("ttf") || e.eq_ignore_ascii_case("otf"))
            })
            .collect();
        paths.sort();
        let mut fonts = Vec::with_capacity(paths.len());
        for path in paths {
            fonts.push(Self::load_file(&path)?);
        }
        Ok(Self { fonts })
    }

    fn load_file(path: &Path) -> Result<LoadedFont> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let font = FontVec::try_from_vec(bytes).map_err(|_| Error::Font(name.clone()))?;
        Ok(LoadedFont {
            name,
            path: path.to_path_buf(),
            font,
        })
    }

    pub fn len(&self) -> usize {
        self.fonts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fonts.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.fonts.iter().map(|f| f.name.as_str()).collect()
    }

    pub fn get(&self, font_id: usize) -> Result<&LoadedFont> {
        self.fonts
            .get(font_id)
            .ok_or_else(|| Error::Font(format!("#{font_id}")))
    }
}

impl LoadedFont {
    /// Width and height in pixels of `text` laid out on a single line at `px_height`.
    pub fn measure(&self, text: &str, px_height: f64) -> (f64, f64) {
        let scaled = self.font.as_scaled(PxScale::from(px_height as f32));
        let mut caret = 0.0f32;
        let mut prev = None;
        for ch in text.chars() {
            let id = self.font.glyph_id(ch);
            if let Some(p) = prev {
                caret += scaled.kern(p, id);
            }
            caret += scaled.h_advance(id);
            prev = Some(id);
        }
        let height = scaled.ascent() - scaled.descent();
        (caret.ceil().max(1.0) as f64, height.ceil().max(1.0) as f64)
    }

    /// Rasterizes `text` on one line into a tight bitmap whose size matches [`Self::measure`].
    pub fn rasterize(&self, text: &str, px_height: f64) -> BinaryMask {
        let (w, h) = self.measure(text, px_height);
        let (w, h) = (w as usize, h as usize);
        let scale = PxScale::from(px_height as f32);
        let scaled = self.font.as_scaled(scale);
        let ascent = scaled.ascent();
        let mut out = BinaryMask::new(h, w);
        let mut caret = 0.0f32;
        let mut prev = None;
        for ch in text.chars() {
            let id = self.font.glyph_id(ch);
            if let Some(p) = prev {
                caret += scaled.kern(p, id);
            }
            let glyph = id.with_scale_and_position(scale, point(caret, ascent));
            caret += scaled.h_advance(id);
            prev = Some(id);
            let Some(outlined) = self.font.outline_glyph(glyph) else {
                continue;
            };
            let bounds = outlined.px_bounds();
            outlined.draw(|x, y, coverage| {
                if coverage < COVERAGE_THRESHOLD {
                    return;
                }
                let col = bounds.min.x as i64 + x as i64;
                let row = bounds.min.y as i64 + y as i64;
                if row >= 0 && col >= 0 && (row as usize) < h && (col as usize) < w {
                    out.set(row as usize, col as usize, true);
                }
            });
        }
        out
    }
}
