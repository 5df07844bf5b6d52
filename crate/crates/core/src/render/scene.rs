use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::font::FontInventory;
use crate::error::{Error, Result};

const BUILTIN_CORPUS: &str = include_str!("../../assets/corpus.txt");

/// An ordered word sequence; phrases are consecutive runs of it.
#[derive(Clone, Debug)]
pub struct Corpus {
    words: Vec<String>,
}

impl Corpus {
    /// Splits newline-delimited text on whitespace, keeping reading order.
    pub fn from_text(text: &str) -> Self {
        Self {
            words: text.split_whitespace().map(str::to_owned).collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_text(&text))
    }

    pub fn builtin() -> Self {
        Self::from_text(BUILTIN_CORPUS)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Bounds for scene sampling. Defaults follow the published Mask Render procedure; the
/// phrase-count, word-count and rotation limits may be narrowed but never widened.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub min_phrases: usize,
    pub max_phrases: usize,
    pub max_words: usize,
    pub max_rotation_deg: f64,
    /// Requested phrase height as a fraction of canvas height, before the width cap.
    pub height_frac: (f64, f64),
    /// Phrases are shortened rather than shrunk below this height.
    pub min_height_px: f64,
    pub max_shear: f64,
    pub scale_range: (f64, f64),
    pub min_det: f64,
    pub placement_tries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_phrases: 1,
            max_phrases: 7,
            max_words: 5,
            max_rotation_deg: 30.0,
            height_frac: (0.15, 0.35),
            min_height_px: 10.0,
            max_shear: 0.3,
            scale_range: (0.7, 1.3),
            min_det: 0.2,
            placement_tries: 50,
        }
    }
}

pub const MAX_PHRASES: usize = 7;
pub const MAX_WORDS: usize = 5;
pub const MAX_ROTATION_DEG: f64 = 30.0;

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_owned()));
        if self.min_phrases < 1 || self.min_phrases > self.max_phrases {
            return bad("phrase count range must satisfy 1 <= min <= max");
        }
        if self.max_phrases > MAX_PHRASES {
            return bad("at most 7 phrases per scene");
        }
        if self.max_words < 1 || self.max_words > MAX_WORDS {
            return bad("words per phrase must be within [1, 5]");
        }
        if !(0.0..=MAX_ROTATION_DEG).contains(&self.max_rotation_deg) {
            return bad("rotation bound must be within [0, 30] degrees");
        }
        let (lo, hi) = self.height_frac;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("height_frac must satisfy 0 < lo <= hi <= 1");
        }
        let (slo, shi) = self.scale_range;
        if !(slo > 0.0 && slo <= shi) || self.max_shear < 0.0 || self.min_det <= 0.0 {
            return bad("affine ranges are degenerate");
        }
        if slo * slo - self.max_shear * self.max_shear < self.min_det {
            return bad("affine ranges admit determinants below min_det");
        }
        Ok(())
    }
}

/// One rendered phrase. `affine` is a 2x3 matrix `[A | t]` applied in phrase-local
/// coordinates (origin at the raster centre, y down) before rotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhraseSpec {
    pub text: String,
    pub font_id: usize,
    pub rotation_deg: f64,
    pub affine: [[f64; 3]; 2],
    pub anchor: (f64, f64),
    pub rendered_height: f64,
}

impl PhraseSpec {
    pub fn word_count(&self) -> usize {
        self.text.split_whitespace().count()
    }

    pub fn affine_det(&self) -> f64 {
        self.affine[0][0] * self.affine[1][1] - self.affine[0][1] * self.affine[1][0]
    }

    /// Local-to-canvas transform as `(linear 2x2, translation)`, combining the affine
    /// distortion, the rotation and the anchor.
    pub fn transform(&self) -> ([[f64; 2]; 2], [f64; 2]) {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        // Counter-clockwise on screen for a y-down raster.
        let rot = [[c, s], [-s, c]];
        let a = [
            [self.affine[0][0], self.affine[0][1]],
            [self.affine[1][0], self.affine[1][1]],
        ];
        let lin = mat_mul(rot, a);
        let t = mat_vec(rot, [self.affine[0][2], self.affine[1][2]]);
        (lin, [self.anchor.0 + t[0], self.anchor.1 + t[1]])
    }

    /// Axis-aligned canvas-space bounds `(min_x, min_y, max_x, max_y)` of a raster of the
    /// given size placed by this phrase's transform.
    pub fn canvas_bounds(&self, raster_w: f64, raster_h: f64) -> (f64, f64, f64, f64) {
        let (lin, t) = self.transform();
        transformed_bounds(lin, t, raster_w, raster_h)
    }
}

fn mat_mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

fn mat_vec(a: [[f64; 2]; 2], v: [f64; 2]) -> [f64; 2] {
    [
        a[0][0] * v[0] + a[0][1] * v[1],
        a[1][0] * v[0] + a[1][1] * v[1],
    ]
}

pub(crate) fn transformed_bounds(
    lin: [[f64; 2]; 2],
    t: [f64; 2],
    w: f64,
    h: f64,
) -> (f64, f64, f64, f64) {
    let corners = [
        [-w / 2.0, -h / 2.0],
        [w / 2.0, -h / 2.0],
        [-w / 2.0, h / 2.0],
        [w / 2.0, h / 2.0],
    ];
    let mut b = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for corner in corners {
        let p = mat_vec(lin, corner);
        let (x, y) = (p[0] + t[0], p[1] + t[1]);
        b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
    }
    b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderScene {
    pub phrases: Vec<PhraseSpec>,
    /// `(height, width)`
    pub canvas: (usize, usize),
    pub seed: u64,
}

impl RenderScene {
    /// Checks phrase-count, word-count, rotation, invertibility and on-canvas invariants.
    pub fn validate(&self, fonts: &FontInventory) -> Result<()> {
        if self.phrases.is_empty() || self.phrases.len() > MAX_PHRASES {
            return Err(Error::Config(format!(
                "scene has {} phrases",
                self.phrases.len()
            )));
        }
        let (ch, cw) = self.canvas;
        for p in &self.phrases {
            let words = p.word_count();
            if !(1..=MAX_WORDS).contains(&words) {
                return Err(Error::Config(format!("phrase {:?} has {words} words", p.text)));
            }
            if p.rotation_deg.abs() > MAX_ROTATION_DEG {
                return Err(Error::Config(format!("rotation {}", p.rotation_deg)));
            }
            if p.affine_det().abs() < 1e-3 {
                return Err(Error::Config("singular phrase affine".into()));
            }
            let font = fonts.get(p.font_id)?;
            let (w, h) = font.measure(&p.text, p.rendered_height);
            let (x0, y0, x1, y1) = p.canvas_bounds(w, h);
            if x1 <= 0.0 || y1 <= 0.0 || x0 >= cw as f64 || y0 >= ch as f64 {
                return Err(Error::Config(format!("phrase {:?} lies off canvas", p.text)));
            }
        }
        Ok(())
    }
}

fn boxes_overlap(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> bool {
    a.0 < b.2 && b.0 < a.2 && a.1 < b.3 && b.1 < a.3
}

/// Samples a scene. Deterministic in `seed`.
pub fn sample_scene(
    corpus: &Corpus,
    fonts: &FontInventory,
    canvas: (usize, usize),
    seed: u64,
    config: &SceneConfig,
) -> Result<RenderScene> {
    if corpus.is_empty() {
        return Err(Error::Config("word corpus is empty".into()));
    }
    if fonts.is_empty() {
        return Err(Error::Config("font inventory is empty".into()));
    }
    config.validate()?;
    let (ch, cw) = (canvas.0 as f64, canvas.1 as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(config.min_phrases..=config.max_phrases);
    let mut phrases = Vec::with_capacity(count);
    let mut placed: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(count);

    for _ in 0..count {
        let words = corpus.words();
        let mut n_words = rng.gen_range(1..=config.max_words).min(words.len());
        let start = rng.gen_range(0..=words.len() - n_words);
        let font_id = rng.gen_range(0..fonts.len());
        let font = fonts.get(font_id)?;
        let rotation_deg = if config.max_rotation_deg > 0.0 {
            rng.gen_range(-config.max_rotation_deg..=config.max_rotation_deg)
        } else {
            0.0
        };
        let affine = loop {
            let sx = rng.gen_range(config.scale_range.0..=config.scale_range.1);
            let sy = rng.gen_range(config.scale_range.0..=config.scale_range.1);
            let (kx, ky) = if config.max_shear > 0.0 {
                (
                    rng.gen_range(-config.max_shear..=config.max_shear),
                    rng.gen_range(-config.max_shear..=config.max_shear),
                )
            } else {
                (0.0, 0.0)
            };
            let m = [[sx, kx, 0.0], [ky, sy, 0.0]];
            if (m[0][0] * m[1][1] - m[0][1] * m[1][0]).abs() >= config.min_det {
                break m;
            }
        };
        let requested = rng.gen_range(config.height_frac.0..=config.height_frac.1) * ch;

        // Shrink to fit the canvas; drop trailing words if that would make the text too small.
        let mut spec = PhraseSpec {
            text: String::new(),
            font_id,
            rotation_deg,
            affine,
            anchor: (cw / 2.0, ch / 2.0),
            rendered_height: requested,
        };
        loop {
            spec.text = words[start..start + n_words].join(" ");
            spec.rendered_height = requested;
            for _ in 0..32 {
                let (w, h) = font.measure(&spec.text, spec.rendered_height);
                let (x0, y0, x1, y1) = spec.canvas_bounds(w, h);
                let factor = (cw / (x1 - x0)).min(ch / (y1 - y0));
                if factor >= 1.0 {
                    break;
                }
                spec.rendered_height *= factor.min(0.99);
            }
            if spec.rendered_height >= config.min_height_px || n_words == 1 {
                break;
            }
            n_words -= 1;
        }

        let (w, h) = font.measure(&spec.text, spec.rendered_height);
        let (x0, y0, x1, y1) = spec.canvas_bounds(w, h);
        let (half_w, half_h) = ((x1 - x0) / 2.0, (y1 - y0) / 2.0);
        let range = |half: f64, extent: f64| {
            if half * 2.0 >= extent {
                (extent / 2.0, extent / 2.0)
            } else {
                (half, extent - half)
            }
        };
        let (ax_lo, ax_hi) = range(half_w, cw);
        let (ay_lo, ay_hi) = range(half_h, ch);
        let mut bounds = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..config.placement_tries.max(1) {
            spec.anchor = (
                if ax_hi > ax_lo { rng.gen_range(ax_lo..ax_hi) } else { ax_lo },
                if ay_hi > ay_lo { rng.gen_range(ay_lo..ay_hi) } else { ay_lo },
            );
            bounds = spec.canvas_bounds(w, h);
            if !placed.iter().any(|&b| boxes_overlap(b, bounds)) {
                break;
            }
        }
        placed.push(bounds);
        phrases.push(spec);
    }

    Ok(RenderScene {
        phrases,
        canvas,
        seed,
    })
}
