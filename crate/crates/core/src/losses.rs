//! Training objectives: heatmap and pose MSE, the margin contrastive loss
//! with in-batch negative mining, and their weighted total.
//!
//! The contrastive term for an anchor `a` (plain encoding), positive `p`
//! (fused encoding of the same sample) and negative `n` is
//!
//! ```text
//! L_con = |a - p|_1 - max(margin, |a - n|_1)
//! ```
//!
//! where `n` is the plain encoding of the batch sample whose ground-truth
//! heatmap lies farthest from the anchor's predicted heatmap.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::types::{Heatmap, Pose3D, HEATMAP_LEN, HEATMAP_SIZE, NUM_JOINTS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Mean over elements and batch.
    #[default]
    Mean,
    /// Plain sums, as the losses are written as squared norms.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MiningMetric {
    #[default]
    L2,
    L1,
}

/// How the negative distance enters the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClampMode {
    /// `- max(margin, d_neg)`: unbounded repulsion of negatives.
    #[default]
    Max,
    /// `- min(margin, d_neg)`: repulsion stops once the margin is reached.
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.0, lambda3: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub margin: f64,
    pub mining_metric: MiningMetric,
    pub reduction: Reduction,
    pub clamp_mode: ClampMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            margin: 0.5,
            mining_metric: MiningMetric::L2,
            reduction: Reduction::Mean,
            clamp_mode: ClampMode::Max,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda1: self.lambda1, lambda2: self.lambda2, lambda3: self.lambda3 }
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape_err(a.len(), b.len()));
    }
    Ok(())
}

fn squared_error(pred: &[f64], gt: &[f64]) -> f64 {
    pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum()
}

pub fn heatmap_loss(pred: &Heatmap, gt: &Heatmap) -> Result<f64> {
    check_len(pred.values(), gt.values())?;
    Ok(squared_error(pred.values(), gt.values()) / HEATMAP_LEN as f64)
}

pub fn pose_loss(pred: &Pose3D, gt: &Pose3D) -> f64 {
    let n = (NUM_JOINTS * 3) as f64;
    let mut acc = 0.0;
    for (p, g) in pred.coords.iter().zip(&gt.coords) {
        acc += squared_error(p, g);
    }
    acc / n
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn heatmap_distance(a: &[f64], b: &[f64], metric: MiningMetric) -> f64 {
    match metric {
        MiningMetric::L2 => squared_error(a, b).sqrt(),
        MiningMetric::L1 => l1_distance(a, b),
    }
}

/// Per-sample predictions and targets for one batch; heatmaps are flattened
/// `21x32x32` vectors and encodings 128-d.
#[derive(Debug, Clone, Default)]
pub struct BatchContext {
    pub predicted_heatmaps: Vec<Vec<f64>>,
    pub gt_heatmaps: Vec<Vec<f64>>,
    pub encodings_plain: Vec<Vec<f64>>,
    pub encodings_fused: Vec<Vec<f64>>,
}

impl BatchContext {
    pub fn len(&self) -> usize {
        self.predicted_heatmaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted_heatmaps.is_empty()
    }
}

pub fn select_negative(batch: &BatchContext, anchor_idx: usize) -> Result<usize> {
    select_negative_with(batch, anchor_idx, MiningMetric::L2)
}

/// Index `j != anchor` maximizing the distance between the anchor's predicted
/// heatmap and sample `j`'s ground-truth heatmap; ties go to the lowest index.
pub fn select_negative_with(batch: &BatchContext, anchor_idx: usize, metric: MiningMetric) -> Result<usize> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::InvalidArgument(format!("negative mining needs a batch of at least 2, got {b}")));
    }
    if batch.gt_heatmaps.len() != b {
        return Err(shape_err(b, batch.gt_heatmaps.len()));
    }
    if anchor_idx >= b {
        return Err(Error::InvalidArgument(format!("anchor {anchor_idx} out of range for batch {b}")));
    }
    let anchor = &batch.predicted_heatmaps[anchor_idx];
    let mut best: Option<(usize, f64)> = None;
    for (j, gt) in batch.gt_heatmaps.iter().enumerate() {
        if j == anchor_idx {
            continue;
        }
        check_len(anchor, gt)?;
        let d = heatmap_distance(anchor, gt, metric);
        if best.map_or(true, |(_, bd)| d > bd) {
            best = Some((j, d));
        }
    }
    Ok(best.expect("batch has another sample").0)
}

pub fn contrastive_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<f64> {
    Ok(contrastive_with_grad(anchor, positive, negative, margin, ClampMode::Max)?.loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrad {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss value and subgradients. `|x|` uses `sign(0) = 0`; the clamp passes
/// gradient to the negative distance only on its active side (for `Max`,
/// strictly above the margin).
pub fn contrastive_with_grad(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
    clamp: ClampMode,
) -> Result<ContrastiveGrad> {
    check_len(anchor, positive)?;
    check_len(anchor, negative)?;
    let d_pos = l1_distance(anchor, positive);
    let d_neg = l1_distance(anchor, negative);
    let (neg_term, neg_active) = match clamp {
        ClampMode::Max => (margin.max(d_neg), d_neg > margin),
        ClampMode::Min => (margin.min(d_neg), d_neg < margin),
    };
    let loss = d_pos - neg_term;
    let mut ga = vec![0.0; anchor.len()];
    let mut gp = vec![0.0; anchor.len()];
    let mut gn = vec![0.0; anchor.len()];
    for k in 0..anchor.len() {
        let sp = sign(anchor[k] - positive[k]);
        ga[k] += sp;
        gp[k] -= sp;
        if neg_active {
            let sn = sign(anchor[k] - negative[k]);
            ga[k] -= sn;
            gn[k] += sn;
        }
    }
    Ok(ContrastiveGrad { loss, anchor: ga, positive: gp, negative: gn })
}

pub fn total_loss(heat: f64, pose: f64, con: f64, w: LossWeights) -> Result<f64> {
    w.validate()?;
    for (name, v) in [("heatmap loss", heat), ("pose loss", pose), ("contrastive loss", con)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    Ok(w.lambda1 * heat + w.lambda2 * pose + w.lambda3 * con)
}

/// Per-sample network outputs and targets fed to [`batch_objective`].
#[derive(Debug, Clone)]
pub struct SampleOutputs<'a> {
    pub heatmap: &'a [f64],
    pub gt_heatmap: &'a [f64],
    /// Which joints are inside the frame; hidden joints are left out of the
    /// heatmap loss.
    pub visible: &'a [bool; NUM_JOINTS],
    pub pose: &'a [f64],
    pub gt_pose: &'a [f64],
    pub encodings: Option<(&'a [f64], &'a [f64])>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub heat: f64,
    pub pose: f64,
    pub con: f64,
    pub total: f64,
    pub negatives: Vec<usize>,
    pub heatmap_grads: Vec<Vec<f64>>,
    pub pose_grads: Vec<Vec<f64>>,
    pub plain_grads: Vec<Vec<f64>>,
    pub fused_grads: Vec<Vec<f64>>,
}

/// Evaluates the weighted objective over a batch and its gradient with
/// respect to every sample's outputs. The contrastive term uses every sample
/// as an anchor in turn and is averaged (or summed) over anchors.
pub fn batch_objective(samples: &[SampleOutputs<'_>], cfg: &LossConfig) -> Result<BatchLoss> {
    let w = cfg.weights();
    w.validate()?;
    let b = samples.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let plane = HEATMAP_SIZE * HEATMAP_SIZE;
    let visible_elems: usize = samples.iter().map(|s| s.visible.iter().filter(|&&v| v).count() * plane).sum();
    let pose_elems = b * NUM_JOINTS * 3;
    let (heat_norm, pose_norm, con_norm) = match cfg.reduction {
        Reduction::Mean => (visible_elems.max(1) as f64, pose_elems as f64, b as f64),
        Reduction::Sum => (1.0, 1.0, 1.0),
    };

    let mut heat = 0.0;
    let mut pose = 0.0;
    let mut heatmap_grads = Vec::with_capacity(b);
    let mut pose_grads = Vec::with_capacity(b);
    for s in samples {
        check_len(s.heatmap, s.gt_heatmap)?;
        check_len(s.pose, s.gt_pose)?;
        let mut gh = vec![0.0; s.heatmap.len()];
        for j in 0..NUM_JOINTS {
            if !s.visible[j] {
                continue;
            }
            for k in j * plane..(j + 1) * plane {
                let d = s.heatmap[k] - s.gt_heatmap[k];
                heat += d * d;
                gh[k] = w.lambda1 * 2.0 * d / heat_norm;
            }
        }
        let mut gp = vec![0.0; s.pose.len()];
        for k in 0..s.pose.len() {
            let d = s.pose[k] - s.gt_pose[k];
            pose += d * d;
            gp[k] = w.lambda2 * 2.0 * d / pose_norm;
        }
        heatmap_grads.push(gh);
        pose_grads.push(gp);
    }
    heat /= heat_norm;
    pose /= pose_norm;

    let mut con = 0.0;
    let mut negatives = Vec::new();
    let mut plain_grads = Vec::new();
    let mut fused_grads = Vec::new();
    let contrastive = samples.iter().all(|s| s.encodings.is_some());
    if contrastive && b < 2 && w.lambda3 > 0.0 {
        return Err(Error::InvalidArgument("contrastive loss needs a batch of at least 2".into()));
    }
    if contrastive && b >= 2 {
        let ctx = BatchContext {
            predicted_heatmaps: samples.iter().map(|s| s.heatmap.to_vec()).collect(),
            gt_heatmaps: samples.iter().map(|s| s.gt_heatmap.to_vec()).collect(),
            encodings_plain: samples.iter().map(|s| s.encodings.unwrap().0.to_vec()).collect(),
            encodings_fused: samples.iter().map(|s| s.encodings.unwrap().1.to_vec()).collect(),
        };
        plain_grads = vec![vec![0.0; ctx.encodings_plain[0].len()]; b];
        fused_grads = vec![vec![0.0; ctx.encodings_plain[0].len()]; b];
        let scale = w.lambda3 / con_norm;
        for i in 0..b {
            let n = select_negative_with(&ctx, i, cfg.mining_metric)?;
            let g = contrastive_with_grad(
                &ctx.encodings_plain[i],
                &ctx.encodings_fused[i],
                &ctx.encodings_plain[n],
                cfg.margin,
                cfg.clamp_mode,
            )?;
            con += g.loss;
            for k in 0..g.anchor.len() {
                plain_grads[i][k] += scale * g.anchor[k];
                fused_grads[i][k] += scale * g.positive[k];
                plain_grads[n][k] += scale * g.negative[k];
            }
            negatives.push(n);
        }
        con /= con_norm;
    } else if w.lambda3 > 0.0 && samples.iter().any(|s| s.encodings.is_some()) {
        return Err(Error::InvalidArgument("encodings missing for part of the batch".into()));
    }

    let total = total_loss(heat, pose, con, w)?;
    Ok(BatchLoss { heat, pose, con, total, negatives, heatmap_grads, pose_grads, plain_grads, fused_grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_heatmap(rng: &mut ChaCha8Rng) -> Heatmap {
        Heatmap::from_vec((0..HEATMAP_LEN).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn heatmap_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_heatmap(&mut rng);
        assert_eq!(heatmap_loss(&a, &a).unwrap(), 0.0);
        let shifted = Heatmap::from_vec(a.values().iter().map(|v| v + 1.0).collect()).unwrap();
        assert!((heatmap_loss(&shifted, &a).unwrap() - 1.0).abs() < 1e-12);

        let b = random_heatmap(&mut rng);
        let mut acc = 0.0;
        for j in 0..NUM_JOINTS {
            for y in 0..HEATMAP_SIZE {
                for x in 0..HEATMAP_SIZE {
                    let i = (j * HEATMAP_SIZE + y) * HEATMAP_SIZE + x;
                    acc += (a.values()[i] - b.values()[i]).powi(2);
                }
            }
        }
        assert!((heatmap_loss(&a, &b).unwrap() - acc / 21504.0).abs() < 1e-7);
    }

    #[test]
    fn pose_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = [[0.0; 3]; NUM_JOINTS];
        c.iter_mut().flatten().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let gt = Pose3D::new(c, 1.0);
        assert_eq!(pose_loss(&gt, &gt), 0.0);
        let mut off = gt;
        off.coords[7][2] += 0.3;
        assert!((pose_loss(&off, &gt) - 0.09 / 63.0).abs() < 1e-15);

        let mut c2 = [[0.0; 3]; NUM_JOINTS];
        c2.iter_mut().flatten().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let other = Pose3D::new(c2, 1.0);
        let mut acc = 0.0;
        for j in 0..NUM_JOINTS {
            for k in 0..3 {
                acc += (other.coords[j][k] - gt.coords[j][k]).powi(2);
            }
        }
        assert!((pose_loss(&other, &gt) - acc / 63.0).abs() < 1e-12);
    }

    fn batch_of(gts: Vec<Vec<f64>>, preds: Vec<Vec<f64>>) -> BatchContext {
        BatchContext { predicted_heatmaps: preds, gt_heatmaps: gts, ..Default::default() }
    }

    #[test]
    fn mining_forced_choice_and_constructed_farthest() {
        let z = vec![0.0; 4];
        let ctx = batch_of(vec![z.clone(), z.clone()], vec![z.clone(), z.clone()]);
        assert_eq!(select_negative(&ctx, 0).unwrap(), 1);
        assert_eq!(select_negative(&ctx, 1).unwrap(), 0);

        let gts = vec![vec![0.0; 4], vec![1.0; 4], vec![2.0; 4], vec![5.0; 4], vec![-1.0; 4]];
        let ctx = batch_of(gts, vec![vec![0.0; 4]; 5]);
        assert_eq!(select_negative(&ctx, 0).unwrap(), 3);
    }

    #[test]
    fn mining_tie_goes_to_lower_index() {
        let gts = vec![vec![0.0; 2], vec![3.0, 0.0], vec![0.0, 3.0], vec![-3.0, 0.0]];
        let ctx = batch_of(gts, vec![vec![0.0; 2]; 4]);
        assert_eq!(select_negative(&ctx, 0).unwrap(), 1);
        assert_eq!(select_negative_with(&ctx, 0, MiningMetric::L1).unwrap(), 1);
    }

    #[test]
    fn mining_rejects_small_batches() {
        let ctx = batch_of(vec![vec![0.0]], vec![vec![0.0]]);
        assert!(select_negative(&ctx, 0).is_err());
    }

    fn vec128(f: impl Fn(usize) -> f64) -> Vec<f64> {
        (0..128).map(f).collect()
    }

    #[test]
    fn contrastive_examples() {
        let a = vec128(|i| i as f64 * 0.01);
        let mut n = a.clone();
        n[0] += 0.25;
        n[1] -= 0.25;
        assert!((contrastive_loss(&a, &a, &n, 0.5).unwrap() + 0.5).abs() < 1e-10);
        assert_eq!(contrastive_loss(&a, &a, &a, 0.5).unwrap(), -0.5);

        let mut p = a.clone();
        p[3] += 2.0;
        let mut n = a.clone();
        n[5] -= 1.5;
        n[6] += 1.5;
        assert!((contrastive_loss(&a, &p, &n, 0.5).unwrap() + 1.0).abs() < 1e-10);
        assert!(contrastive_loss(&a, &p[..3], &n, 0.5).is_err());
    }

    #[test]
    fn contrastive_margin_floor_blocks_negative_gradient() {
        let a = vec128(|i| i as f64);
        let mut n = a.clone();
        n[2] += 0.2;
        let g = contrastive_with_grad(&a, &a, &n, 0.5, ClampMode::Max).unwrap();
        assert!(g.negative.iter().all(|&v| v == 0.0));
        let g = contrastive_with_grad(&a, &a, &n, 0.5, ClampMode::Min).unwrap();
        assert_eq!(g.negative[2], -1.0);
        assert!((g.loss + 0.2).abs() < 1e-12);
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = contrastive_with_grad(&a, &p, &n, 0.5, ClampMode::Max).unwrap();
        let h = 1e-7;
        for k in [0, 17, 127] {
            let mut ap = a.clone();
            ap[k] += h;
            let mut am = a.clone();
            am[k] -= h;
            let num =
                (contrastive_loss(&ap, &p, &n, 0.5).unwrap() - contrastive_loss(&am, &p, &n, 0.5).unwrap()) / (2.0 * h);
            assert!((num - g.anchor[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn total_loss_cases() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 2.0, 3.0, w).unwrap() - 3.3).abs() < 1e-12);
        let w0 = LossWeights { lambda3: 0.0, ..w };
        assert_eq!(total_loss(0.7, 0.2, 99.0, w0).unwrap(), 0.7 + 0.2);
        assert_eq!(total_loss(0.0, 0.0, 0.0, w).unwrap(), 0.0);
        assert!(matches!(total_loss(f64::NAN, 0.0, 0.0, w), Err(Error::NonFinite(_))));
        assert!(total_loss(0.0, 0.0, 0.0, LossWeights { lambda1: -1.0, ..w }).is_err());
    }

    proptest::proptest! {
        #[test]
        fn contrastive_bounds(
            a in proptest::collection::vec(-2.0f64..2.0, 8),
            p in proptest::collection::vec(-2.0f64..2.0, 8),
            n in proptest::collection::vec(-2.0f64..2.0, 8),
            margin in 0.0f64..3.0,
        ) {
            let loss = contrastive_loss(&a, &p, &n, margin).unwrap();
            let dn = l1_distance(&a, &n);
            proptest::prop_assert!(loss >= -margin.max(dn) - 1e-12);
            if dn <= margin {
                proptest::prop_assert!((loss - (l1_distance(&a, &p) - margin)).abs() < 1e-12);
            }
        }
    }
}
