//! k-fold cross-validation over a small hyperparameter grid.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::FusionMode;

use super::config::TrainConfig;
use super::eval::evaluate_model;
use super::trainer::Trainer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub image_ratio: f64,
    pub lambda3: f64,
    pub fusion_mode: FusionMode,
}

impl GridPoint {
    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        c.clip.image_ratio = self.image_ratio;
        c.loss.lambda3 = self.lambda3;
        c.arch.fusion_mode = self.fusion_mode;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best: GridPoint,
    pub best_index: usize,
    /// Mean validation EPE per grid point.
    pub mean_epe: Vec<f64>,
    /// `fold_epe[g][f]`: validation EPE of grid point `g` on fold `f`.
    pub fold_epe: Vec<Vec<f64>>,
}

/// Splits a seeded permutation of `0..n` into `k` folds whose sizes differ
/// by at most one.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!("dataset of {n} samples is smaller than k = {k}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x6b66_6f6c_64));
    let mut folds = vec![Vec::new(); k];
    for (i, idx) in order.into_iter().enumerate() {
        folds[i % k].push(idx);
    }
    Ok(folds)
}

/// Validation EPE of one grid point on one fold, training on the rest.
pub fn fold_epe(cfg: &TrainConfig, data: &Dataset, folds: &[Vec<usize>], fold: usize) -> Result<f64> {
    let train_idx: Vec<usize> =
        folds.iter().enumerate().filter(|(f, _)| *f != fold).flat_map(|(_, v)| v.iter().copied()).collect();
    let train = data.subset(&train_idx)?;
    let val = data.subset(&folds[fold])?;
    let outcome = Trainer::new(cfg.clone(), false)?.run(&train, None)?;
    Ok(evaluate_model(&outcome.model, &val)?.epe_mm)
}

/// Trains every grid point on k-1 folds, validates on the held-out fold and
/// returns the point with the lowest mean EPE (earliest on ties).
pub fn cross_validate(cfg: &TrainConfig, data: &Dataset, k: usize, grid: &[GridPoint]) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty hyperparameter grid".into()));
    }
    let folds = kfold_indices(data.len(), k, cfg.seed)?;
    let mut fold_epes = Vec::with_capacity(grid.len());
    let mut mean_epe = Vec::with_capacity(grid.len());
    for point in grid {
        let c = point.apply(cfg);
        c.validate()?;
        let epes = (0..k).map(|f| fold_epe(&c, data, &folds, f)).collect::<Result<Vec<_>>>()?;
        mean_epe.push(epes.iter().sum::<f64>() / k as f64);
        fold_epes.push(epes);
    }
    let mut best_index = 0;
    for (i, &m) in mean_epe.iter().enumerate() {
        if m < mean_epe[best_index] {
            best_index = i;
        }
    }
    Ok(CvResult { best: grid[best_index], best_index, mean_epe, fold_epe: fold_epes })
}
