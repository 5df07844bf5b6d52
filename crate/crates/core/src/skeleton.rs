//! Zhang-Suen thinning.
//!
//! Each iteration runs two sub-passes. A sub-pass first marks every foreground pixel that
//! satisfies its deletion template against the *current* grid, then clears all marks at once.
//! Iteration stops when a full two-sub-pass sweep deletes nothing. Pixels outside the grid are
//! treated as background.

use crate::mask::BinaryMask;

/// Neighbour offsets in the order P2..P9: N, NE, E, SE, S, SW, W, NW.
const NEIGHBOURS: [(isize, isize); 8] = [
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SubPass {
    First,
    Second,
}

fn neighbourhood(mask: &BinaryMask, row: usize, col: usize) -> [bool; 8] {
    let mut p = [false; 8];
    for (slot, (dr, dc)) in p.iter_mut().zip(NEIGHBOURS) {
        *slot = mask.get_or_bg(row as isize + dr, col as isize + dc);
    }
    p
}

fn deletable(p: &[bool; 8], pass: SubPass) -> bool {
    let b = p.iter().filter(|&&v| v).count();
    if !(2..=6).contains(&b) {
        return false;
    }
    // A(P1): 0 -> 1 transitions around the ordered ring P2, P3, ..., P9, P2.
    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
    if a != 1 {
        return false;
    }
    let (n, e, s, w) = (p[0], p[2], p[4], p[6]);
    match pass {
        SubPass::First => !(n && e && s) && !(e && s && w),
        SubPass::Second => !(n && e && w) && !(n && s && w),
    }
}

fn sub_pass(mask: &mut BinaryMask, pass: SubPass) -> bool {
    let (h, w) = mask.dims();
    let mut marked = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) && deletable(&neighbourhood(mask, r, c), pass) {
                marked.push((r, c));
            }
        }
    }
    for &(r, c) in &marked {
        mask.set(r, c, false);
    }
    !marked.is_empty()
}

/// Thins `mask` to a one-pixel-wide skeleton. The result has the same dimensions, is a subset
/// of the input and is a fixed point of the procedure.
pub fn zhang_suen_thin(mask: &BinaryMask) -> BinaryMask {
    let mut out = mask.clone();
    loop {
        let first = sub_pass(&mut out, SubPass::First);
        let second = sub_pass(&mut out, SubPass::Second);
        if !first && !second {
            return out;
        }
    }
}

/// `true` when no foreground pixel of `mask` matches either sub-pass deletion template.
pub fn is_thinning_fixed_point(mask: &BinaryMask) -> bool {
    let (h, w) = mask.dims();
    (0..h).all(|r| {
        (0..w).all(|c| {
            if !mask.get(r, c) {
                return true;
            }
            let p = neighbourhood(mask, r, c);
            !deletable(&p, SubPass::First) && !deletable(&p, SubPass::Second)
        })
    })
}

/// Skeleton ground truth for a batch of masks, order preserved.
pub fn skeleton_targets(masks: &[BinaryMask]) -> Vec<BinaryMask> {
    masks.iter().map(zhang_suen_thin).collect()
}
