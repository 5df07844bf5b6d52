//! On-disk sample archives:
//!
//! ```text
//! <root>/image/<idx>.png     8-bit RGB
//! <root>/mask/<idx>.png      8-bit gray, 0 = background, 255 = text
//! <root>/skeleton/<idx>.png  optional, same encoding as masks
//! <root>/meta.jsonl          one record per sample
//! ```

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::color::ColorImage;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub const IMAGE_DIR: &str = "image";
pub const MASK_DIR: &str = "mask";
pub const SKELETON_DIR: &str = "skeleton";
pub const META_FILE: &str = "meta.jsonl";

pub fn sample_name(index: usize) -> String {
    format!("{index:05}.png")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhraseRecord {
    pub text: String,
    pub font: String,
    pub font_id: usize,
    pub rotation_deg: f64,
    pub affine: [[f64; 3]; 2],
    pub anchor: (f64, f64),
    pub rendered_height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub index: usize,
    pub seed: u64,
    pub scene_seed: u64,
    pub style_seed: u64,
    pub phrases: Vec<PhraseRecord>,
    pub foreground: String,
    pub background: String,
    pub foreground_ratio: f64,
}

/// A directory laid out as above.
#[derive(Clone, Debug)]
pub struct Archive {
    root: PathBuf,
}

impl Archive {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let masks = root.join(MASK_DIR);
        if !masks.is_dir() {
            return Err(Error::io(
                &masks,
                std::io::Error::new(std::io::ErrorKind::NotFound, "archive has no mask directory"),
            ));
        }
        Ok(Self { root })
    }

    pub fn create(root: impl Into<PathBuf>, with_skeletons: bool) -> Result<Self> {
        let root = root.into();
        let mut dirs = vec![IMAGE_DIR, MASK_DIR];
        if with_skeletons {
            dirs.push(SKELETON_DIR);
        }
        for d in dirs {
            let p = root.join(d);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        self.root.join(IMAGE_DIR).join(sample_name(index))
    }

    pub fn mask_path(&self, index: usize) -> PathBuf {
        self.root.join(MASK_DIR).join(sample_name(index))
    }

    pub fn skeleton_path(&self, index: usize) -> PathBuf {
        self.root.join(SKELETON_DIR).join(sample_name(index))
    }

    /// Sample indices present in the mask directory, ascending.
    pub fn indices(&self) -> Result<Vec<usize>> {
        list_png_stems(&self.root.join(MASK_DIR))
    }

    pub fn load_image(&self, index: usize) -> Result<ColorImage> {
        ColorImage::load_png(self.image_path(index))
    }

    pub fn load_mask(&self, index: usize) -> Result<BinaryMask> {
        BinaryMask::load_png(self.mask_path(index))
    }

    pub fn write_meta(&self, records: &[SampleMeta]) -> Result<()> {
        let path = self.root.join(META_FILE);
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = std::io::BufWriter::new(file);
        for r in records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn read_meta(&self) -> Result<Vec<SampleMeta>> {
        let path = self.root.join(META_FILE);
        let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}

/// Numeric stems of `*.png` files in `dir`, ascending. Non-numeric names are ignored.
pub fn list_png_stems(dir: &Path) -> Result<Vec<usize>> {
    let mut out: Vec<usize> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .filter_map(|p| p.file_stem()?.to_str()?.parse().ok())
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// `*.png` file names in `dir`, sorted.
pub fn list_png_names(dir: &Path) -> Result<Vec<String>> {
    let mut out: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .filter_map(|p| Some(p.file_name()?.to_str()?.to_owned()))
        .collect();
    out.sort();
    Ok(out)
}

/// SplitMix64 finalizer; used to derive independent per-item RNG seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
