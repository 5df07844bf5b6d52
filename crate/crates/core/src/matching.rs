//! Bipartite matching between predicted queries and ground-truth masks.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::heads::{PredictionSet, TEXT_CLASS};
use crate::mask::BinaryMask;
use crate::loss::DICE_EPS;
use crate::nn::{resize_bilinear_plane, softmax_last, softplus};

/// Weights of the matching cost terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchWeights {
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            bce: 5.0,
            dice: 5.0,
        }
    }
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`), by the
/// shortest augmenting path method with potentials. Returns the column per row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "more rows than columns");
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

fn assignment_cost(cost: &[Vec<f64>], cols: &[usize]) -> f64 {
    cols.iter().enumerate().map(|(r, &c)| cost[r][c]).sum()
}

fn optimal_cost(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    let sub: Vec<Vec<f64>> = rows
        .iter()
        .map(|&r| cols.iter().map(|&c| cost[r][c]).collect())
        .collect();
    let a = hungarian(&sub);
    assignment_cost(&sub, &a)
}

/// Optimal assignment with deterministic tie-breaking: among all minimum-cost assignments,
/// the one whose column sequence (row 0 first) is lexicographically smallest.
/// `cost` is `rows x cols` with `rows <= cols`.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let rows = cost.len();
    if rows == 0 {
        return Ok(Vec::new());
    }
    let cols = cost[0].len();
    if cost.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("ragged cost matrix".into()));
    }
    if rows > cols {
        return Err(Error::Shape(format!(
            "{rows} ground-truth masks but only {cols} queries"
        )));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("matching cost".into()));
    }
    let best = optimal_cost(cost, &(0..rows).collect::<Vec<_>>(), &(0..cols).collect::<Vec<_>>());
    let tol = 1e-9 * (1.0 + best.abs());
    let mut chosen = Vec::with_capacity(rows);
    let mut fixed = 0.0;
    for r in 0..rows {
        let rest_rows: Vec<usize> = (r + 1..rows).collect();
        let mut picked = None;
        for c in 0..cols {
            if chosen.contains(&c) {
                continue;
            }
            let free: Vec<usize> = (0..cols).filter(|k| *k != c && !chosen.contains(k)).collect();
            let rest = if rest_rows.is_empty() {
                0.0
            } else {
                optimal_cost(cost, &rest_rows, &free)
            };
            if fixed + cost[r][c] + rest <= best + tol {
                picked = Some(c);
                break;
            }
        }
        // Some column always attains the optimum; fall back to the plain solution on
        // round-off trouble.
        let Some(c) = picked else {
            return Ok(hungarian(cost));
        };
        fixed += cost[r][c];
        chosen.push(c);
    }
    Ok(chosen)
}

/// Area-averaged `{0, 1}` plane of `mask` at `(h, w)`. Integer factors average whole blocks;
/// other sizes fall back to bilinear resampling.
pub fn mask_plane_at(mask: &BinaryMask, h: usize, w: usize) -> Vec<f64> {
    let (mh, mw) = mask.dims();
    let plane: Vec<f64> = mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    if (mh, mw) == (h, w) {
        return plane;
    }
    if mh % h == 0 && mw % w == 0 {
        let (fy, fx) = (mh / h, mw / w);
        let norm = (fy * fx) as f64;
        let mut out = vec![0.0; h * w];
        for r in 0..mh {
            for c in 0..mw {
                out[(r / fy) * w + c / fx] += plane[r * mw + c];
            }
        }
        out.iter_mut().for_each(|v| *v /= norm);
        return out;
    }
    resize_bilinear_plane(&plane, mh, mw, h, w)
}

/// Matching cost between every query of a single-image prediction (`B = 1`) and every ground
/// truth mask: `class · (-p_text) + bce · BCE + dice · Dice`. The mask terms are evaluated at
/// the prediction resolution against area-averaged ground truth. Returns `gt x queries`.
pub fn cost_matrix(pred: &PredictionSet, gt_masks: &[BinaryMask], weights: MatchWeights) -> Result<Vec<Vec<f64>>> {
    if gt_masks.is_empty() {
        return Ok(Vec::new());
    }
    let (b, n, h, w) = pred.mask_logits.dims4()?;
    if b != 1 {
        return Err(Error::Shape(format!("cost matrix expects one image, got batch {b}")));
    }
    let dims = gt_masks[0].dims();
    if gt_masks.iter().any(|m| m.dims() != dims) {
        return Err(Error::Shape("ground-truth masks differ in size".into()));
    }
    let hw = (h * w) as f64;
    let dtype = pred.mask_logits.dtype();
    let device = pred.mask_logits.device();
    let x = pred.mask_logits.detach().reshape((n, h * w))?;
    let targets: Vec<f64> = gt_masks.iter().flat_map(|m| mask_plane_at(m, h, w)).collect();
    let t = Tensor::from_vec(targets, (gt_masks.len(), h * w), device)?
        .to_dtype(dtype)?
        .t()?; // (hw, G)

    let sp = softplus(&x)?.sum_keepdim(D::Minus1)?; // (N, 1)
    let xt = x.matmul(&t)?; // (N, G)
    let bce = (sp.broadcast_sub(&xt)? / hw)?;
    let p = candle_nn::ops::sigmoid(&x)?;
    let pt = p.matmul(&t)?;
    let ps = p.sum_keepdim(D::Minus1)?;
    let ts = t.sum_keepdim(0)?; // (1, G)
    let dice = (1.0 - ((pt * 2.0)? + DICE_EPS)?.broadcast_div(&(ps.broadcast_add(&ts)? + DICE_EPS)?)?)?;
    let p_text = softmax_last(&pred.class_logits.detach().reshape((n, 2))?)?
        .narrow(1, TEXT_CLASS, 1)?; // (N, 1)
    let total = ((bce * weights.bce)? + (dice * weights.dice)?)?
        .broadcast_sub(&(p_text * weights.class)?)?;
    let per_query = total.to_dtype(DType::F64)?.to_vec2::<f64>()?; // (N, G)
    Ok((0..gt_masks.len())
        .map(|g| per_query.iter().map(|row| row[g]).collect())
        .collect())
}

/// Matches queries of a single-image prediction to ground-truth masks. Returns
/// `(query, gt)` pairs sorted by gt index.
pub fn match_queries(pred: &PredictionSet, gt_masks: &[BinaryMask], weights: MatchWeights) -> Result<Vec<(usize, usize)>> {
    let n = pred.num_queries()?;
    if gt_masks.len() > n {
        return Err(Error::Shape(format!(
            "{} ground-truth masks but only {n} queries",
            gt_masks.len()
        )));
    }
    let cost = cost_matrix(pred, gt_masks, weights)?;
    Ok(min_cost_assignment(&cost)?
        .into_iter()
        .enumerate()
        .map(|(g, q)| (q, g))
        .collect())
}
