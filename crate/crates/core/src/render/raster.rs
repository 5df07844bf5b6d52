use super::font::FontInventory;
use super::scene::{PhraseSpec, RenderScene};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Stamps `raster` onto `canvas` through the phrase transform, sampling the raster at the
/// pre-image of each canvas pixel centre (nearest neighbour).
pub fn stamp_phrase(canvas: &mut BinaryMask, raster: &BinaryMask, phrase: &PhraseSpec) -> Result<()> {
    let (lin, t) = phrase.transform();
    let det = lin[0][0] * lin[1][1] - lin[0][1] * lin[1][0];
    if det.abs() < 1e-9 {
        return Err(Error::Config(format!("phrase {:?} has a singular transform", phrase.text)));
    }
    let inv = [
        [lin[1][1] / det, -lin[0][1] / det],
        [-lin[1][0] / det, lin[0][0] / det],
    ];
    let (rh, rw) = (raster.height() as f64, raster.width() as f64);
    let (x0, y0, x1, y1) = phrase.canvas_bounds(rw, rh);
    let (ch, cw) = canvas.dims();
    let col_lo = x0.floor().max(0.0) as usize;
    let row_lo = y0.floor().max(0.0) as usize;
    let col_hi = (x1.ceil().max(0.0) as usize).min(cw);
    let row_hi = (y1.ceil().max(0.0) as usize).min(ch);
    for row in row_lo..row_hi {
        for col in col_lo..col_hi {
            let dx = col as f64 + 0.5 - t[0];
            let dy = row as f64 + 0.5 - t[1];
            let lx = inv[0][0] * dx + inv[0][1] * dy + rw / 2.0;
            let ly = inv[1][0] * dx + inv[1][1] * dy + rh / 2.0;
            if lx < 0.0 || ly < 0.0 || lx >= rw || ly >= rh {
                continue;
            }
            if raster.get(ly as usize, lx as usize) {
                canvas.set(row, col, true);
            }
        }
    }
    Ok(())
}

/// Rasterizes every phrase of `scene` onto a blank canvas.
pub fn render_mask(scene: &RenderScene, fonts: &FontInventory) -> Result<BinaryMask> {
    let (h, w) = scene.canvas;
    let mut canvas = BinaryMask::new(h, w);
    for phrase in &scene.phrases {
        let font = fonts.get(phrase.font_id)?;
        let raster = font.rasterize(&phrase.text, phrase.rendered_height);
        stamp_phrase(&mut canvas, &raster, phrase)?;
    }
    Ok(canvas)
}
