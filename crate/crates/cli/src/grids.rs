//! Sample-grid images: one PNG per case showing the input, the mean
//! prediction, each latent hypothesis, and every rater's annotation side by
//! side, nearest-upscaled for visibility.

use harmonizer_core::{Error, Result, Tensor};
use image::{GrayImage, Luma};
use std::path::Path;

const SCALE: u32 = 4;
const GAP: u32 = 2;

fn plane(t: &Tensor) -> Result<(usize, usize, &[f64])> {
    match t.shape() {
        [h, w] => Ok((*h, *w, t.data())),
        [1, h, w] => Ok((*h, *w, t.data())),
        other => Err(Error::shape(
            "sample_grid_png",
            "[H,W] or [1,H,W]",
            format!("{other:?}"),
        )),
    }
}

/// Writes one grid row `input | tiles...` as a grayscale PNG.
pub fn sample_grid_png(path: &Path, tiles: &[&Tensor]) -> Result<()> {
    const OP: &str = "sample_grid_png";
    if tiles.is_empty() {
        return Err(Error::invalid(OP, "need at least one tile".to_string()));
    }
    let (h, w, _) = plane(tiles[0])?;
    let tile_w = w as u32 * SCALE;
    let tile_h = h as u32 * SCALE;
    let total_w = GAP + tiles.len() as u32 * (tile_w + GAP);
    let total_h = tile_h + 2 * GAP;
    // Mid-gray canvas so the separators are visible on any content.
    let mut img = GrayImage::from_pixel(total_w, total_h, Luma([128u8]));
    for (i, tile) in tiles.iter().enumerate() {
        let (th, tw, data) = plane(tile)?;
        if th != h || tw != w {
            return Err(Error::shape(OP, format!("[{h},{w}]"), format!("[{th},{tw}]")));
        }
        let x0 = GAP + i as u32 * (tile_w + GAP);
        for py in 0..tile_h {
            for px in 0..tile_w {
                let sy = (py / SCALE) as usize;
                let sx = (px / SCALE) as usize;
                let v = data[sy * w + sx].clamp(0.0, 1.0);
                img.put_pixel(x0 + px, GAP + py, Luma([(v * 255.0).round() as u8]));
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}
