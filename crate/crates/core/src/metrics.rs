//! Foreground IoU and F-score.

use std::ops::{Add, AddAssign};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::list_png_names;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Adds the per-pixel agreement of `pred` against `gt` to `counts`.
pub fn accumulate(pred: &BinaryMask, gt: &BinaryMask, counts: ConfusionCounts) -> Result<ConfusionCounts> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let mut c = counts;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `100 · tp / (tp + fp + fn)`; 100 when both masks are empty.
pub fn fg_iou(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        100.0
    } else {
        100.0 * c.tp as f64 / denom as f64
    }
}

/// Harmonic mean of foreground precision and recall; 1 when both masks are empty and 0 when
/// there is no true positive.
pub fn f_score(c: &ConfusionCounts) -> f64 {
    if c.tp + c.fp + c.fn_ == 0 {
        return 1.0;
    }
    if c.tp == 0 {
        return 0.0;
    }
    // 2PR / (P + R) reduced to a single division
    2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub counts: ConfusionCounts,
    pub fg_iou: f64,
    pub f_score: f64,
    /// Present in per-image mode: mean of per-image scores.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_image: Option<Vec<ImageScore>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    pub fg_iou: f64,
    pub f_score: f64,
}

impl EvalReport {
    /// One-line JSON record with fgIoU to two decimals and F to three.
    pub fn to_json_line(&self) -> String {
        let mut v = serde_json::json!({
            "images": self.images,
            "tp": self.counts.tp,
            "fp": self.counts.fp,
            "fn": self.counts.fn_,
            "tn": self.counts.tn,
            "fg_iou": format!("{:.2}", self.fg_iou),
            "f_score": format!("{:.3}", self.f_score),
        });
        if let Some(per) = &self.per_image {
            let n = per.len().max(1) as f64;
            v["mean_image_fg_iou"] = format!("{:.2}", per.iter().map(|s| s.fg_iou).sum::<f64>() / n).into();
            v["mean_image_f_score"] = format!("{:.3}", per.iter().map(|s| s.f_score).sum::<f64>() / n).into();
            v["per_image"] = serde_json::to_value(
                per.iter()
                    .map(|s| {
                        serde_json::json!({
                            "name": s.name,
                            "fg_iou": format!("{:.2}", s.fg_iou),
                            "f_score": format!("{:.3}", s.f_score),
                        })
                    })
                    .collect::<Vec<_>>(),
            )
            .expect("plain json");
        }
        v.to_string()
    }
}

/// Scores `(name, prediction, ground truth)` triples with global counting.
pub fn evaluate_pairs<'a>(
    pairs: impl IntoIterator<Item = (String, &'a BinaryMask, &'a BinaryMask)>,
    per_image: bool,
) -> Result<EvalReport> {
    let mut counts = ConfusionCounts::default();
    let mut scores = Vec::new();
    let mut images = 0;
    for (name, pred, gt) in pairs {
        let c = accumulate(pred, gt, ConfusionCounts::default())?;
        counts += c;
        images += 1;
        if per_image {
            scores.push(ImageScore {
                name,
                fg_iou: fg_iou(&c),
                f_score: f_score(&c),
            });
        }
    }
    Ok(EvalReport {
        images,
        counts,
        fg_iou: fg_iou(&counts),
        f_score: f_score(&counts),
        per_image: per_image.then_some(scores),
    })
}

/// Compares same-named mask PNGs in two directories. Each directory may be a mask directory
/// or an archive root containing `mask/`. Every ground-truth mask needs a prediction.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, per_image: bool) -> Result<EvalReport> {
    let pred_dir = resolve_mask_dir(pred_dir);
    let gt_dir = resolve_mask_dir(gt_dir);
    let names = list_png_names(&gt_dir)?;
    let mut loaded = Vec::with_capacity(names.len());
    for name in &names {
        let pred_path = pred_dir.join(name);
        let pred = BinaryMask::load_png(&pred_path)?;
        let gt = BinaryMask::load_png(gt_dir.join(name))?;
        if pred.dims() != gt.dims() {
            return Err(Error::Shape(format!(
                "{name}: prediction {:?} vs ground truth {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        loaded.push((name.clone(), pred, gt));
    }
    evaluate_pairs(loaded.iter().map(|(n, p, g)| (n.clone(), p, g)), per_image)
}

fn resolve_mask_dir(dir: &Path) -> std::path::PathBuf {
    let nested = dir.join(crate::archive::MASK_DIR);
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}
