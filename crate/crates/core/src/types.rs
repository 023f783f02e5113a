//! Shared value types: images, heatmaps, 3D poses.
//!
//! Joint order (used everywhere): wrist, then thumb, index, middle, ring and
//! pinky, each listed from the base joint to the tip.
//!
//! ```text
//!  0 wrist
//!  1 thumb CMC    2 thumb MCP    3 thumb IP     4 thumb tip
//!  5 index MCP    6 index PIP    7 index DIP    8 index tip
//!  9 middle MCP  10 middle PIP  11 middle DIP  12 middle tip
//! 13 ring MCP    14 ring PIP    15 ring DIP    16 ring tip
//! 17 pinky MCP   18 pinky PIP   19 pinky DIP   20 pinky tip
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub const NUM_JOINTS: usize = 21;
pub const IMAGE_SIZE: usize = 256;
pub const HEATMAP_SIZE: usize = 32;
/// Pixels per heatmap cell.
pub const HEATMAP_STRIDE: f64 = (IMAGE_SIZE / HEATMAP_SIZE) as f64;
pub const HEATMAP_LEN: usize = NUM_JOINTS * HEATMAP_SIZE * HEATMAP_SIZE;
pub const CLIP_DIM: usize = 512;
pub const ENCODING_DIM: usize = 128;

/// Joint index pairs that form the kinematic tree, parent first.
pub const BONES: [(usize, usize); 20] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 4),
    (0, 5),
    (5, 6),
    (6, 7),
    (7, 8),
    (0, 9),
    (9, 10),
    (10, 11),
    (11, 12),
    (0, 13),
    (13, 14),
    (14, 15),
    (15, 16),
    (0, 17),
    (17, 18),
    (18, 19),
    (19, 20),
];

/// The bone whose length defines the unit of the canonical frame
/// (middle finger MCP to PIP).
pub const SCALE_BONE: (usize, usize) = (9, 10);

/// 8-bit RGB image, row-major, channels interleaved. Pixel values are read
/// back as reals in `[0, 1]`.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Image").field("width", &self.width).field("height", &self.height).finish_non_exhaustive()
    }
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(shape_err(width * height * 3, data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn bytes_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn check_model_input(&self) -> Result<()> {
        if self.width != IMAGE_SIZE || self.height != IMAGE_SIZE {
            return Err(shape_err(
                format!("{IMAGE_SIZE}x{IMAGE_SIZE}x3 image"),
                format!("{}x{}x3", self.width, self.height),
            ));
        }
        Ok(())
    }

    /// Planar `[3, H, W]` copy with values scaled to `[0, 1]`.
    pub fn to_planar(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c] as f64 / 255.0;
            }
        }
        out
    }
}

/// Per-joint confidence maps, `[21, 32, 32]` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    values: Vec<f64>,
}

impl Heatmap {
    pub fn zeros() -> Self {
        Self { values: vec![0.0; HEATMAP_LEN] }
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if values.len() != HEATMAP_LEN {
            return Err(shape_err(
                format!("{NUM_JOINTS}x{HEATMAP_SIZE}x{HEATMAP_SIZE} heatmap"),
                format!("{} values", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("heatmap".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, joint: usize) -> &[f64] {
        let n = HEATMAP_SIZE * HEATMAP_SIZE;
        &self.values[joint * n..(joint + 1) * n]
    }

    pub(crate) fn channel_mut(&mut self, joint: usize) -> &mut [f64] {
        let n = HEATMAP_SIZE * HEATMAP_SIZE;
        &mut self.values[joint * n..(joint + 1) * n]
    }

    /// Grid cell `(x, y)` of the first maximum in a channel.
    pub fn argmax(&self, joint: usize) -> (usize, usize) {
        let ch = self.channel(joint);
        let mut best = 0;
        for (i, &v) in ch.iter().enumerate() {
            if v > ch[best] {
                best = i;
            }
        }
        (best % HEATMAP_SIZE, best / HEATMAP_SIZE)
    }
}

/// 21 joints in a root-relative frame, in units of the middle-finger MCP
/// bone. `scale` converts units to millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose3D {
    pub coords: [[f64; 3]; NUM_JOINTS],
    pub scale: f64,
}

impl Pose3D {
    pub fn new(coords: [[f64; 3]; NUM_JOINTS], scale: f64) -> Self {
        Self { coords, scale }
    }

    /// Normalizes absolute joint positions (any metric unit) into the
    /// root-relative bone-length frame; `scale` is the bone length in that unit.
    pub fn from_absolute(joints: &[[f64; 3]; NUM_JOINTS]) -> Result<Self> {
        let root = joints[0];
        let (a, b) = SCALE_BONE;
        let scale = dist3(&joints[a], &joints[b]);
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("degenerate scale bone length {scale}")));
        }
        let mut coords = [[0.0; 3]; NUM_JOINTS];
        for (c, j) in coords.iter_mut().zip(joints) {
            for k in 0..3 {
                c[k] = (j[k] - root[k]) / scale;
            }
        }
        Ok(Self { coords, scale })
    }

    pub fn to_mm(&self) -> [[f64; 3]; NUM_JOINTS] {
        let mut out = self.coords;
        for c in out.iter_mut() {
            for v in c.iter_mut() {
                *v *= self.scale;
            }
        }
        out
    }

    pub fn flat(&self) -> Vec<f64> {
        self.coords.iter().flatten().copied().collect()
    }

    pub fn from_flat(values: &[f64], scale: f64) -> Result<Self> {
        if values.len() != NUM_JOINTS * 3 {
            return Err(shape_err(format!("{NUM_JOINTS}x3 pose"), format!("{} values", values.len())));
        }
        let mut coords = [[0.0; 3]; NUM_JOINTS];
        for (c, chunk) in coords.iter_mut().zip(values.chunks_exact(3)) {
            c.copy_from_slice(chunk);
        }
        Ok(Self { coords, scale })
    }
}

pub fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planar_layout() {
        let mut img = Image::filled(2, 2, [0, 0, 0]);
        img.set_pixel(1, 0, [255, 0, 51]);
        let p = img.to_planar();
        assert_eq!(p[1], 1.0);
        assert_eq!(p[4 + 1], 0.0);
        assert!((p[8 + 1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn pose_normalization() {
        let mut joints = [[0.0; 3]; NUM_JOINTS];
        for (i, j) in joints.iter_mut().enumerate() {
            *j = [10.0 + i as f64, 20.0, 30.0 + 2.0 * i as f64];
        }
        let pose = Pose3D::from_absolute(&joints).unwrap();
        assert_eq!(pose.coords[0], [0.0, 0.0, 0.0]);
        assert!((pose.scale - 5f64.sqrt()).abs() < 1e-12);
        let mm = pose.to_mm();
        assert!((mm[20][2] - 40.0).abs() < 1e-9);
    }

    #[test]
    fn heatmap_shape_checked() {
        assert!(Heatmap::from_vec(vec![0.0; 10]).is_err());
        assert!(Heatmap::from_vec(vec![f64::NAN; HEATMAP_LEN]).is_err());
    }
}
