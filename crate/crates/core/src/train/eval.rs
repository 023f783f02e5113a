//! End-point error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::PoseModel;
use crate::types::{dist3, Pose3D, NUM_JOINTS};

use super::checkpoint::Checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over samples of the per-sample mean joint error.
    pub epe_mm: f64,
    pub per_joint_epe: Vec<f64>,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn table(&self) -> String {
        const NAMES: [&str; 5] = ["thumb", "index", "middle", "ring", "pinky"];
        let mut out =
            format!("samples  {}\nEPE (mm) {:.3}\n\njoint            EPE (mm)\n", self.n_samples, self.epe_mm);
        for (j, e) in self.per_joint_epe.iter().enumerate() {
            let name = if j == 0 { "wrist".to_string() } else { format!("{} {}", NAMES[(j - 1) / 4], (j - 1) % 4 + 1) };
            out.push_str(&format!("{j:>2} {name:<13} {e:>9.3}\n"));
        }
        out
    }
}

/// Per-joint Euclidean errors (mm) between two root-relative poses given in
/// millimetres.
pub fn joint_errors_mm(pred_mm: &[[f64; 3]; NUM_JOINTS], gt_mm: &[[f64; 3]; NUM_JOINTS]) -> [f64; NUM_JOINTS] {
    std::array::from_fn(|j| dist3(&pred_mm[j], &gt_mm[j]))
}

/// Averages per-sample joint errors into a report.
pub fn report_from_errors(errors: &[[f64; NUM_JOINTS]]) -> Result<EvalReport> {
    if errors.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
    }
    let n = errors.len() as f64;
    let mut per_joint = vec![0.0; NUM_JOINTS];
    let mut epe = 0.0;
    for e in errors {
        epe += e.iter().sum::<f64>() / NUM_JOINTS as f64;
        for (acc, v) in per_joint.iter_mut().zip(e) {
            *acc += v;
        }
    }
    per_joint.iter_mut().for_each(|v| *v /= n);
    let report = EvalReport { epe_mm: epe / n, per_joint_epe: per_joint, n_samples: errors.len() };
    if !report.epe_mm.is_finite() {
        return Err(Error::NonFinite("EPE".into()));
    }
    Ok(report)
}

/// Converts a predicted canonical pose to millimetres with the ground
/// truth's scale. Both poses are root-relative, so no further alignment is
/// applied.
pub fn sample_errors(pred: &Pose3D, gt: &Pose3D) -> Result<[f64; NUM_JOINTS]> {
    if !(gt.scale > 0.0 && gt.scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("sample has no usable mm scale ({})", gt.scale)));
    }
    let pred_mm = Pose3D::new(pred.coords, gt.scale).to_mm();
    Ok(joint_errors_mm(&pred_mm, &gt.to_mm()))
}

pub fn evaluate_model(model: &PoseModel, dataset: &Dataset) -> Result<EvalReport> {
    let errors = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let s = dataset.get(i)?;
            let pred = model.predict(&s.image)?;
            sample_errors(&pred, &s.joints3d)
        })
        .collect::<Result<Vec<_>>>()?;
    report_from_errors(&errors)
}

pub fn evaluate_epe(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<EvalReport> {
    evaluate_model(&checkpoint.model()?, dataset)
}
