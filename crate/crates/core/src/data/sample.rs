use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::types::{Image, Pose3D, NUM_JOINTS};

use super::heatmap::{render_gt_heatmap, GtHeatmap};

/// Pinhole intrinsics plus the absolute root position, enough to reproject
/// a [`Pose3D`] into the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub root_mm: [f64; 3],
}

impl Camera {
    pub fn project(&self, p: &[f64; 3]) -> [f64; 2] {
        [self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy]
    }

    pub fn project_pose(&self, pose: &Pose3D) -> [[f64; 2]; NUM_JOINTS] {
        let mm = pose.to_mm();
        let mut out = [[0.0; 2]; NUM_JOINTS];
        for (o, j) in out.iter_mut().zip(mm.iter()) {
            *o = self.project(&[j[0] + self.root_mm[0], j[1] + self.root_mm[1], j[2] + self.root_mm[2]]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub source: String,
    pub id: String,
    pub camera: Option<Camera>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub joints3d: Pose3D,
    /// Pixel coordinates in the 256x256 image.
    pub joints2d: [[f64; 2]; NUM_JOINTS],
    pub meta: SampleMeta,
}

impl Sample {
    pub fn scale_mm(&self) -> f64 {
        self.joints3d.scale
    }

    pub fn gt_heatmap(&self, sigma: f64) -> Result<GtHeatmap> {
        render_gt_heatmap(&self.joints2d, sigma)
    }
}
