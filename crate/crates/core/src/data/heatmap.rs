//! Ground-truth heatmap rendering.

use crate::error::{Error, Result};
use crate::types::{Heatmap, HEATMAP_SIZE, HEATMAP_STRIDE, IMAGE_SIZE, NUM_JOINTS};

pub const DEFAULT_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct GtHeatmap {
    pub heatmap: Heatmap,
    /// Joints that fall inside the image; the others have all-zero channels.
    pub visible: [bool; NUM_JOINTS],
}

pub fn in_frame(p: &[f64; 2]) -> bool {
    let size = IMAGE_SIZE as f64;
    p[0] >= 0.0 && p[0] < size && p[1] >= 0.0 && p[1] < size
}

/// Grid cell holding a channel's peak: nearest cell per axis, halves rounded
/// down, clamped to the grid.
pub fn quantize(p: &[f64; 2]) -> (usize, usize) {
    let q = |v: f64| ((v / HEATMAP_STRIDE - 0.5).ceil()).clamp(0.0, (HEATMAP_SIZE - 1) as f64) as usize;
    (q(p[0]), q(p[1]))
}

/// One Gaussian per joint on the 32x32 grid, centred at `pixel / 8`, with
/// `sigma` in grid cells and each channel's peak scaled to 1.
pub fn render_gt_heatmap(joints2d: &[[f64; 2]; NUM_JOINTS], sigma: f64) -> Result<GtHeatmap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let mut heatmap = Heatmap::zeros();
    let mut visible = [false; NUM_JOINTS];
    let denom = 2.0 * sigma * sigma;
    for (j, p) in joints2d.iter().enumerate() {
        if !in_frame(p) {
            continue;
        }
        visible[j] = true;
        let (cx, cy) = (p[0] / HEATMAP_STRIDE, p[1] / HEATMAP_STRIDE);
        let gx: Vec<f64> = (0..HEATMAP_SIZE).map(|x| (-(x as f64 - cx).powi(2) / denom).exp()).collect();
        let gy: Vec<f64> = (0..HEATMAP_SIZE).map(|y| (-(y as f64 - cy).powi(2) / denom).exp()).collect();
        let ch = heatmap.channel_mut(j);
        let mut peak = 0.0f64;
        for (y, wy) in gy.iter().enumerate() {
            for (x, wx) in gx.iter().enumerate() {
                let v = wy * wx;
                ch[y * HEATMAP_SIZE + x] = v;
                peak = peak.max(v);
            }
        }
        if peak > 0.0 {
            ch.iter_mut().for_each(|v| *v /= peak);
        } else {
            // Underflow for tiny sigma: fall back to a one-hot channel.
            let (qx, qy) = quantize(p);
            ch[qy * HEATMAP_SIZE + qx] = 1.0;
        }
    }
    Ok(GtHeatmap { heatmap, visible })
}
