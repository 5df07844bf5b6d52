//! Mask, skeleton and classification losses with deep supervision over decoder layers.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{PredictionSet, NO_OBJECT, NUM_CLASSES, TEXT_CLASS};
use crate::mask::BinaryMask;
use crate::matching::{match_queries, MatchWeights};
use crate::nn::{log_softmax_last, resize_bilinear, softplus};

pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_dice: f64,
    pub lambda_cls_matched: f64,
    pub lambda_cls_unmatched: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ce: 5.0,
            lambda_dice: 5.0,
            lambda_cls_matched: 2.0,
            lambda_cls_unmatched: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_ce,
            self.lambda_dice,
            self.lambda_cls_matched,
            self.lambda_cls_unmatched,
        ];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config("loss weights must be finite and non-negative".into()))
        }
    }

    pub fn match_weights(&self) -> MatchWeights {
        MatchWeights {
            class: self.lambda_cls_matched,
            bce: self.lambda_ce,
            dice: self.lambda_dice,
        }
    }
}

/// Row-wise mean binary cross-entropy on logits: `(M, P)` to `(M,)`.
pub fn bce_rows(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    check_same(logits, targets)?;
    let per_pixel = (softplus(logits)? - (logits * targets)?)?;
    Ok(per_pixel.mean(D::Minus1)?)
}

/// Row-wise smoothed dice loss on logits: `(M, P)` to `(M,)`.
pub fn dice_rows(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    check_same(logits, targets)?;
    let p = candle_nn::ops::sigmoid(logits)?;
    let num = (((&p * targets)?.sum(D::Minus1)? * 2.0)? + DICE_EPS)?;
    let den = ((p.sum(D::Minus1)? + targets.sum(D::Minus1)?)? + DICE_EPS)?;
    Ok((1.0 - (num / den)?)?)
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("logits {:?} vs targets {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `{0, 1}` tensor of a mask, flattened to `(1, H·W)`.
pub fn mask_tensor(mask: &BinaryMask, dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f32> = mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(v, (1, mask.data().len()), device)?.to_dtype(dtype)?)
}

fn plane_check(logits: &Tensor, target: &BinaryMask) -> Result<Tensor> {
    let (h, w) = logits.dims2()?;
    if (h, w) != target.dims() {
        return Err(Error::Shape(format!(
            "logits {h}x{w} vs mask {:?}",
            target.dims()
        )));
    }
    mask_tensor(target, logits.dtype(), logits.device())
}

/// Mean per-pixel binary cross-entropy of `(H, W)` logits against a mask.
pub fn bce_loss(logits: &Tensor, target: &BinaryMask) -> Result<Tensor> {
    let t = plane_check(logits, target)?;
    Ok(bce_rows(&logits.reshape((1, ()))?, &t)?.squeeze(0)?)
}

/// `1 - (2 Σ p t + 1) / (Σ p + Σ t + 1)` of `(H, W)` logits against a mask.
pub fn dice_loss(logits: &Tensor, target: &BinaryMask) -> Result<Tensor> {
    let t = plane_check(logits, target)?;
    Ok(dice_rows(&logits.reshape((1, ()))?, &t)?.squeeze(0)?)
}

/// `λ_ce · bce + λ_dice · dice`, summed over rows. Used for both masks and skeletons.
pub fn mask_term(logits: &Tensor, targets: &Tensor, weights: &LossWeights) -> Result<Tensor> {
    let bce = bce_rows(logits, targets)?;
    let dice = dice_rows(logits, targets)?;
    Ok(((bce * weights.lambda_ce)? + (dice * weights.lambda_dice)?)?.sum_all()?)
}

/// Ground truth for one image.
#[derive(Clone, Debug, Default)]
pub struct Target {
    pub masks: Vec<BinaryMask>,
    pub skeletons: Vec<BinaryMask>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Term {
    Mask,
    Skeleton,
    Class,
}

impl Term {
    pub fn name(self) -> &'static str {
        match self {
            Term::Mask => "mask",
            Term::Skeleton => "skeleton",
            Term::Class => "class",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermRecord {
    pub term: Term,
    pub layer: usize,
    pub value: f64,
}

#[derive(Debug)]
pub struct LossOutput {
    pub total: Tensor,
    /// One record per (layer, term), ordered by layer then term.
    pub records: Vec<TermRecord>,
    /// Matches per layer and image as `(query, gt)` pairs.
    pub matches: Vec<Vec<Vec<(usize, usize)>>>,
}

impl LossOutput {
    pub fn term_sum(&self, term: Term) -> f64 {
        self.records.iter().filter(|r| r.term == term).map(|r| r.value).sum()
    }

    pub fn total_value(&self) -> Result<f64> {
        Ok(self.total.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Gathers rows `(b, q)` of a `(B, N, h, w)` tensor, upsamples them to `(H, W)` and flattens:
/// `(M, H·W)`.
fn gather_upsampled(logits: &Tensor, rows: &[(usize, usize)], height: usize, width: usize) -> Result<Tensor> {
    let (b, n, h, w) = logits.dims4()?;
    let idx: Vec<u32> = rows.iter().map(|&(bi, q)| (bi * n + q) as u32).collect();
    let idx = Tensor::from_vec(idx, rows.len(), logits.device())?;
    let flat = logits.reshape((b * n, h, w))?.index_select(&idx, 0)?;
    Ok(resize_bilinear(&flat, height, width)?.reshape((rows.len(), height * width))?)
}

/// Deep-supervised loss over all prediction sets. `targets` has one entry per batch element.
/// Mask and skeleton terms are summed over matched pairs and averaged over the batch. The class
/// term is the weighted mean cross-entropy over all queries of the batch, `Σ w·ce / Σ w`. The
/// total sums all layers.
pub fn total_loss(prediction_sets: &[PredictionSet], targets: &[Target], weights: &LossWeights) -> Result<LossOutput> {
    weights.validate()?;
    let Some(first) = prediction_sets.first() else {
        return Err(Error::Shape("no prediction sets".into()));
    };
    let (b, n, _, _) = first.mask_logits.dims4()?;
    if targets.len() != b {
        return Err(Error::Shape(format!("{} targets for batch of {b}", targets.len())));
    }
    let mut size = None;
    for t in targets {
        if t.masks.len() != t.skeletons.len() {
            return Err(Error::Shape(format!(
                "{} masks but {} skeletons",
                t.masks.len(),
                t.skeletons.len()
            )));
        }
        for m in t.masks.iter().chain(&t.skeletons) {
            if *size.get_or_insert(m.dims()) != m.dims() {
                return Err(Error::Shape("ground-truth sizes differ within batch".into()));
            }
        }
    }
    let dtype = first.mask_logits.dtype();
    let device = first.mask_logits.device().clone();

    // ground truth rows in (image, gt) order
    let mut gt_rows = Vec::new();
    let mut sk_rows = Vec::new();
    for t in targets {
        for (m, s) in t.masks.iter().zip(&t.skeletons) {
            gt_rows.push(mask_tensor(m, dtype, &device)?);
            sk_rows.push(mask_tensor(s, dtype, &device)?);
        }
    }
    let gt_all = if gt_rows.is_empty() { None } else { Some(Tensor::cat(&gt_rows, 0)?) };
    let sk_all = if sk_rows.is_empty() { None } else { Some(Tensor::cat(&sk_rows, 0)?) };
    let offsets: Vec<usize> = targets
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.masks.len();
            Some(o)
        })
        .collect();

    let mut total = Tensor::zeros((), dtype, &device)?;
    let mut records = Vec::new();
    let mut all_matches = Vec::new();
    for (layer, pred) in prediction_sets.iter().enumerate() {
        if pred.mask_logits.dims4()? != first.mask_logits.dims4()? {
            return Err(Error::Shape(format!("prediction set {layer} has a different shape")));
        }
        let mut matches = Vec::with_capacity(b);
        let mut class_target = vec![NO_OBJECT as u32; b * n];
        let mut class_weight = vec![weights.lambda_cls_unmatched; b * n];
        let mut pred_rows = Vec::new();
        let mut gt_index = Vec::new();
        for (bi, t) in targets.iter().enumerate() {
            let m = match_queries(&pred.select(bi)?, &t.masks, weights.match_weights())?;
            for &(q, g) in &m {
                class_target[bi * n + q] = TEXT_CLASS as u32;
                class_weight[bi * n + q] = weights.lambda_cls_matched;
                pred_rows.push((bi, q));
                gt_index.push((offsets[bi] + g) as u32);
            }
            matches.push(m);
        }

        // classification
        let logp = log_softmax_last(&pred.class_logits)?.reshape((b * n, NUM_CLASSES))?;
        let tgt = Tensor::from_vec(class_target, (b * n, 1), &device)?;
        let picked = logp.gather(&tgt, 1)?.squeeze(1)?;
        let norm: f64 = class_weight.iter().sum();
        let norm = if norm > 0.0 { norm } else { 1.0 };
        let w = Tensor::from_vec(class_weight, b * n, &device)?.to_dtype(dtype)?;
        let class = ((picked * w)?.neg()?.sum_all()? / norm)?;
        let mut layer_terms = vec![(Term::Mask, None), (Term::Skeleton, None), (Term::Class, Some(class))];

        if !pred_rows.is_empty() {
            let (h, w) = size.expect("matched pairs imply ground truth");
            let gidx = Tensor::from_vec(gt_index, pred_rows.len(), &device)?;
            let gt = gt_all.as_ref().expect("ground truth present").index_select(&gidx, 0)?;
            let logits = gather_upsampled(&pred.mask_logits, &pred_rows, h, w)?;
            layer_terms[0].1 = Some((mask_term(&logits, &gt, weights)? / b as f64)?);
            if let Some(sk) = &pred.skeleton_logits {
                let sgt = sk_all.as_ref().expect("skeletons present").index_select(&gidx, 0)?;
                let slogits = gather_upsampled(sk, &pred_rows, h, w)?;
                layer_terms[1].1 = Some((mask_term(&slogits, &sgt, weights)? / b as f64)?);
            }
        }
        for (term, value) in layer_terms {
            let v = match value {
                Some(v) => {
                    total = (total + &v)?;
                    scalar(&v)?
                }
                None => 0.0,
            };
            if term == Term::Skeleton && pred.skeleton_logits.is_none() {
                continue;
            }
            records.push(TermRecord { term, layer, value: v });
        }
        all_matches.push(matches);
    }
    Ok(LossOutput {
        total,
        records,
        matches: all_matches,
    })
}
