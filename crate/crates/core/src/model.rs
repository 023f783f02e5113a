//! The hand pose estimator: a CPM-style 2D heatmap net, the two-stream
//! Poseprior net, and the training-only Branch2 with its projection head.
//!
//! Heatmap net (input `3x256x256`):
//!
//! ```text
//! stem    conv 4x4/4  3 -> stem_channels, ReLU, maxpool 2x2     -> 32x32
//! trunk   conv 3x3    stem -> feature_channels, ReLU           = backbone feature
//! stage1  conv 1x1    feature -> 21                            = h1
//! refine  conv 3x3    (feature ++ h_prev) -> refine_channels, ReLU,
//!         conv 1x1    -> 21                                    = h2, h3, ...
//! ```
//!
//! Poseprior net: two identical streams over the final heatmap
//! (conv 3x3/2, ReLU, conv 3x3/2, ReLU, FC, ReLU, FC). One emits the
//! canonical 21x3 pose, the other an unconstrained 3x3 matrix that is
//! projected onto SO(3).
//!
//! Branch2 taps the backbone feature (or the first refinement's hidden
//! activations), runs a ConvBlock (two conv 3x3/2 + ReLU) and an FC layer to
//! get the 512-d plain feature `e1`. The fused feature `e2` comes from
//! combining `e1` with the CLIP feature (concatenation or sum) and two more
//! FC layers. A weight-shared projection head maps both to 128-d encodings.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::clip::ClipFeature;
use crate::error::{shape_err, Error, Result};
use crate::nn::{maxpool2, maxpool2_backward, relu_backward, relu_inplace, Conv2d, Fmap, Init, Linear, ParamLayout};
use crate::types::{Heatmap, Image, Pose3D, CLIP_DIM, ENCODING_DIM, HEATMAP_LEN, HEATMAP_SIZE, IMAGE_SIZE, NUM_JOINTS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Concat,
    Sum,
}

/// Where Branch2 reads its input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TapPoint {
    #[default]
    Backbone,
    FirstRefinement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub stem_channels: usize,
    pub feature_channels: usize,
    pub refine_channels: usize,
    pub refine_stages: usize,
    pub prior_channels: usize,
    pub prior_hidden: usize,
    pub branch2_channels: usize,
    /// Build Branch2 and the projection head at all.
    pub branch2: bool,
    pub tap: TapPoint,
    pub fusion_mode: FusionMode,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            feature_channels: 32,
            refine_channels: 16,
            refine_stages: 2,
            prior_channels: 16,
            prior_hidden: 128,
            branch2_channels: 32,
            branch2: true,
            tap: TapPoint::Backbone,
            fusion_mode: FusionMode::Concat,
        }
    }
}

impl ArchConfig {
    /// A narrow variant for fast tests; same interfaces and shapes at the
    /// boundaries.
    pub fn tiny() -> Self {
        Self {
            stem_channels: 4,
            feature_channels: 6,
            refine_channels: 4,
            refine_stages: 2,
            prior_channels: 4,
            prior_hidden: 16,
            branch2_channels: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths =
            [self.stem_channels, self.feature_channels, self.prior_channels, self.prior_hidden, self.branch2_channels];
        if widths.contains(&0) || (self.refine_stages > 0 && self.refine_channels == 0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        if self.tap == TapPoint::FirstRefinement && self.refine_stages == 0 {
            return Err(Error::InvalidArgument("first_refinement tap needs a refinement stage".into()));
        }
        Ok(())
    }
}

/// Backbone activations that Branch2 consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneFeature(pub Fmap);

#[derive(Debug, Clone, PartialEq)]
pub struct IntermediateFeature(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct EncodingVector(pub Vec<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationMatrix(pub [[f64; 3]; 3]);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn about_axis(axis: [f64; 3], angle: f64) -> Self {
        let r = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis.into()), angle);
        Self::from_matrix(r.matrix())
    }

    pub(crate) fn from_matrix(m: &Matrix3<f64>) -> Self {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = m[(i, j)];
            }
        }
        Self(out)
    }

    pub(crate) fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.0[i][j])
    }

    /// Frobenius norm of `R^T R - I`.
    pub fn orthonormality_error(&self) -> f64 {
        let m = self.matrix();
        (m.transpose() * m - Matrix3::identity()).norm()
    }

    pub fn determinant(&self) -> f64 {
        self.matrix().determinant()
    }

    /// Rotates every row vector: `out_j = R p_j`.
    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        let r = &self.0;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
        ]
    }
}

/// Nearest rotation to `m` plus what its backward pass needs.
#[derive(Debug, Clone)]
pub(crate) struct SO3Projection {
    pub rotation: Matrix3<f64>,
    v: Matrix3<f64>,
    /// Eigenvalues of the symmetric factor `S` in `M = R S`.
    s: [f64; 3],
}

pub(crate) fn project_to_so3(m: &Matrix3<f64>) -> SO3Projection {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    let sigma = svd.singular_values;
    let flip = (u * v.transpose()).determinant() < 0.0;
    let mut d = Matrix3::identity();
    let mut s = [sigma[0], sigma[1], sigma[2]];
    if flip {
        let k = (0..3).min_by(|&a, &b| sigma[a].total_cmp(&sigma[b])).unwrap();
        d[(k, k)] = -1.0;
        s[k] = -s[k];
    }
    SO3Projection { rotation: u * d * v.transpose(), v, s }
}

impl SO3Projection {
    /// Gradient with respect to the unconstrained matrix given `dL/dR`.
    pub fn backward(&self, d_rot: &Matrix3<f64>) -> Matrix3<f64> {
        let r = &self.rotation;
        let b = self.v.transpose() * r.transpose() * d_rot * self.v;
        let mut c = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                c[(i, j)] = b[(i, j)] / (self.s[i] + self.s[j]);
            }
        }
        let c = self.v * c * self.v.transpose();
        r * (c - c.transpose())
    }
}

/// Rotates the canonical pose into camera space and re-centers the root.
pub fn compose_pose(canonical: &Pose3D, rotation: &RotationMatrix) -> Pose3D {
    let root = rotation.apply(&canonical.coords[0]);
    let mut coords = [[0.0; 3]; NUM_JOINTS];
    for (out, c) in coords.iter_mut().zip(&canonical.coords) {
        let p = rotation.apply(c);
        *out = [p[0] - root[0], p[1] - root[1], p[2] - root[2]];
    }
    Pose3D { coords, scale: canonical.scale }
}

/// Backward of [`compose_pose`]: returns `(d canonical, d R)`.
fn compose_backward(
    canonical: &[[f64; 3]; NUM_JOINTS],
    rotation: &Matrix3<f64>,
    d_out: &[[f64; 3]; NUM_JOINTS],
) -> ([[f64; 3]; NUM_JOINTS], Matrix3<f64>) {
    let rt = rotation.transpose();
    let mut d_can = [[0.0; 3]; NUM_JOINTS];
    let mut total = nalgebra::Vector3::zeros();
    let mut d_rot = Matrix3::zeros();
    let root = nalgebra::Vector3::from(canonical[0]);
    for j in 0..NUM_JOINTS {
        let g = nalgebra::Vector3::from(d_out[j]);
        let dc = rt * g;
        d_can[j] = [dc[0], dc[1], dc[2]];
        total += g;
        let rel = nalgebra::Vector3::from(canonical[j]) - root;
        d_rot += g * rel.transpose();
    }
    let dr = rt * total;
    for k in 0..3 {
        d_can[0][k] -= dr[k];
    }
    (d_can, d_rot)
}

#[derive(Debug, Clone)]
struct PriorStream {
    conv1: Conv2d,
    conv2: Conv2d,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct StreamTrace {
    c1: Fmap,
    c2: Fmap,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

impl PriorStream {
    fn new(layout: &mut ParamLayout, name: &str, arch: &ArchConfig, outputs: usize, out_gain: f64, bias: Init) -> Self {
        let pc = arch.prior_channels;
        let flat = pc * (HEATMAP_SIZE / 4) * (HEATMAP_SIZE / 4);
        Self {
            conv1: Conv2d::new(layout, &format!("{name}.conv1"), NUM_JOINTS, pc, 3, 2, 1),
            conv2: Conv2d::new(layout, &format!("{name}.conv2"), pc, pc, 3, 2, 1),
            fc1: Linear::new(layout, &format!("{name}.fc1"), flat, arch.prior_hidden),
            fc2: Linear::with_init(layout, &format!("{name}.fc2"), arch.prior_hidden, outputs, out_gain, bias),
        }
    }

    fn forward(&self, layout: &ParamLayout, p: &[f64], h: &Fmap) -> StreamTrace {
        let mut c1 = self.conv1.forward(layout, p, h);
        relu_inplace(&mut c1.data);
        let mut c2 = self.conv2.forward(layout, p, &c1);
        relu_inplace(&mut c2.data);
        let mut hidden = self.fc1.forward(layout, p, &c2.data);
        relu_inplace(&mut hidden);
        let out = self.fc2.forward(layout, p, &hidden);
        StreamTrace { c1, c2, hidden, out }
    }

    fn backward(
        &self,
        layout: &ParamLayout,
        p: &[f64],
        h: &Fmap,
        t: &StreamTrace,
        d_out: &[f64],
        g: &mut [f64],
    ) -> Fmap {
        let mut dh = self.fc2.backward(layout, p, &t.hidden, d_out, g, true).unwrap();
        relu_backward(&t.hidden, &mut dh);
        let mut dc2 = self.fc1.backward(layout, p, &t.c2.data, &dh, g, true).unwrap();
        relu_backward(&t.c2.data, &mut dc2);
        let dc2 = Fmap::from_vec(t.c2.c, t.c2.h, t.c2.w, dc2);
        let mut dc1 = self.conv2.backward(layout, p, &t.c1, &dc2, g, true).unwrap();
        relu_backward(&t.c1.data, &mut dc1.data);
        self.conv1.backward(layout, p, h, &dc1, g, true).unwrap()
    }
}

#[derive(Debug, Clone)]
struct Branch2 {
    conv1: Conv2d,
    conv2: Conv2d,
    proj: Linear,
    fuse_in: Linear,
    fuse_out: Linear,
    mode: FusionMode,
}

#[derive(Debug, Clone)]
struct Branch2Trace {
    c1: Fmap,
    c2: Fmap,
    plain: Vec<f64>,
    fused_input: Vec<f64>,
    fused_hidden: Vec<f64>,
}

impl Branch2 {
    fn new(layout: &mut ParamLayout, arch: &ArchConfig, tap_channels: usize) -> Self {
        let bc = arch.branch2_channels;
        let flat = bc * (HEATMAP_SIZE / 4) * (HEATMAP_SIZE / 4);
        let fuse_inputs = match arch.fusion_mode {
            FusionMode::Concat => 2 * CLIP_DIM,
            FusionMode::Sum => CLIP_DIM,
        };
        Self {
            conv1: Conv2d::new(layout, "branch2.conv1", tap_channels, bc, 3, 2, 1),
            conv2: Conv2d::new(layout, "branch2.conv2", bc, bc, 3, 2, 1),
            proj: Linear::with_init(layout, "branch2.proj", flat, CLIP_DIM, 0.5, Init::Zeros),
            fuse_in: Linear::new(layout, "branch2.fuse_in", fuse_inputs, CLIP_DIM),
            fuse_out: Linear::with_init(layout, "branch2.fuse_out", CLIP_DIM, CLIP_DIM, 0.5, Init::Zeros),
            mode: arch.fusion_mode,
        }
    }

    fn plain(&self, layout: &ParamLayout, p: &[f64], tap: &Fmap) -> (Fmap, Fmap, Vec<f64>) {
        let mut c1 = self.conv1.forward(layout, p, tap);
        relu_inplace(&mut c1.data);
        let mut c2 = self.conv2.forward(layout, p, &c1);
        relu_inplace(&mut c2.data);
        let plain = self.proj.forward(layout, p, &c2.data);
        (c1, c2, plain)
    }

    fn fuse(&self, layout: &ParamLayout, p: &[f64], plain: &[f64], clip: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let fused_input: Vec<f64> = match self.mode {
            FusionMode::Concat => plain.iter().chain(clip).copied().collect(),
            FusionMode::Sum => plain.iter().zip(clip).map(|(a, b)| a + b).collect(),
        };
        let mut hidden = self.fuse_in.forward(layout, p, &fused_input);
        relu_inplace(&mut hidden);
        let fused = self.fuse_out.forward(layout, p, &hidden);
        (fused_input, hidden, fused)
    }

    fn forward(&self, layout: &ParamLayout, p: &[f64], tap: &Fmap, clip: &[f64]) -> (Branch2Trace, Vec<f64>) {
        let (c1, c2, plain) = self.plain(layout, p, tap);
        let (fused_input, fused_hidden, fused) = self.fuse(layout, p, &plain, clip);
        (Branch2Trace { c1, c2, plain, fused_input, fused_hidden }, fused)
    }

    /// Returns the gradient with respect to the tap activations.
    fn backward(
        &self,
        layout: &ParamLayout,
        p: &[f64],
        tap: &Fmap,
        t: &Branch2Trace,
        d_plain: &[f64],
        d_fused: &[f64],
        g: &mut [f64],
    ) -> Fmap {
        let mut dh = self.fuse_out.backward(layout, p, &t.fused_hidden, d_fused, g, true).unwrap();
        relu_backward(&t.fused_hidden, &mut dh);
        let dz = self.fuse_in.backward(layout, p, &t.fused_input, &dh, g, true).unwrap();
        let mut dp: Vec<f64> = d_plain.to_vec();
        dp.iter_mut().zip(&dz[..CLIP_DIM]).for_each(|(a, b)| *a += b);
        let mut dc2 = self.proj.backward(layout, p, &t.c2.data, &dp, g, true).unwrap();
        relu_backward(&t.c2.data, &mut dc2);
        let dc2 = Fmap::from_vec(t.c2.c, t.c2.h, t.c2.w, dc2);
        let mut dc1 = self.conv2.backward(layout, p, &t.c1, &dc2, g, true).unwrap();
        relu_backward(&t.c1.data, &mut dc1.data);
        self.conv1.backward(layout, p, tap, &dc1, g, true).unwrap()
    }
}

#[derive(Debug, Clone)]
struct ProjectionHead {
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct HeadTrace {
    input: Vec<f64>,
    hidden: Vec<f64>,
}

impl ProjectionHead {
    fn forward(&self, layout: &ParamLayout, p: &[f64], e: &[f64]) -> (HeadTrace, Vec<f64>) {
        let mut hidden = self.fc1.forward(layout, p, e);
        relu_inplace(&mut hidden);
        let out = self.fc2.forward(layout, p, &hidden);
        (HeadTrace { input: e.to_vec(), hidden }, out)
    }

    fn backward(&self, layout: &ParamLayout, p: &[f64], t: &HeadTrace, d_out: &[f64], g: &mut [f64]) -> Vec<f64> {
        let mut dh = self.fc2.backward(layout, p, &t.hidden, d_out, g, true).unwrap();
        relu_backward(&t.hidden, &mut dh);
        self.fc1.backward(layout, p, &t.input, &dh, g, true).unwrap()
    }
}

/// Activations of the heatmap net kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HeatmapTrace {
    input: Fmap,
    stem: Fmap,
    pool_idx: Vec<u32>,
    pooled: Fmap,
    feature: Fmap,
    stage_inputs: Vec<Fmap>,
    stage_hidden: Vec<Fmap>,
    heatmaps: Vec<Fmap>,
}

impl HeatmapTrace {
    pub fn final_heatmap(&self) -> &Fmap {
        self.heatmaps.last().expect("at least one stage")
    }

    fn tap(&self, tap: TapPoint) -> &Fmap {
        match tap {
            TapPoint::Backbone => &self.feature,
            TapPoint::FirstRefinement => &self.stage_hidden[0],
        }
    }
}

#[derive(Debug, Clone)]
struct PriorTrace {
    canonical: StreamTrace,
    rotation: StreamTrace,
    projection: SO3Projection,
}

const IDENTITY9: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

/// Everything a training step needs from one sample's forward pass.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    heat: HeatmapTrace,
    prior: PriorTrace,
    /// Composed root-relative pose, flattened 21x3.
    pub pose: Vec<f64>,
    branch2: Option<(Branch2Trace, HeadTrace, HeadTrace)>,
    /// Plain and fused encodings `(e'1, e'2)` when Branch2 ran.
    pub encodings: Option<(Vec<f64>, Vec<f64>)>,
}

impl TrainTrace {
    pub fn heatmap(&self) -> &[f64] {
        &self.heat.final_heatmap().data
    }

    /// Hash of every discrete branch taken during the forward pass (ReLU
    /// masks, pooling choices, reflection flag). Two parameter vectors with
    /// equal signatures lie in the same smooth piece of the network.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let mut mask = |v: &[f64]| {
            for chunk in v.chunks(64) {
                let bits = chunk.iter().enumerate().fold(0u64, |acc, (i, &x)| acc | (((x > 0.0) as u64) << i));
                bits.hash(&mut h);
            }
        };
        mask(&self.heat.stem.data);
        mask(&self.heat.feature.data);
        self.heat.stage_hidden.iter().for_each(|s| mask(&s.data));
        for s in [&self.prior.canonical, &self.prior.rotation] {
            mask(&s.c1.data);
            mask(&s.c2.data);
            mask(&s.hidden);
        }
        if let Some((b, h1, h2)) = &self.branch2 {
            mask(&b.c1.data);
            mask(&b.c2.data);
            mask(&b.fused_hidden);
            mask(&h1.hidden);
            mask(&h2.hidden);
        }
        self.heat.pool_idx.hash(&mut h);
        self.prior.projection.s.iter().map(|s| s.is_sign_negative()).collect::<Vec<_>>().hash(&mut h);
        h.finish()
    }
}

/// Loss gradients with respect to one sample's outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub heatmap: Vec<f64>,
    pub pose: Vec<f64>,
    pub plain: Option<Vec<f64>>,
    pub fused: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct HandPoseNet {
    arch: ArchConfig,
    layout: ParamLayout,
    stem: Conv2d,
    trunk: Conv2d,
    stage1: Conv2d,
    refine: Vec<(Conv2d, Conv2d)>,
    prior_canonical: PriorStream,
    prior_rotation: PriorStream,
    branch2: Option<Branch2>,
    head: Option<ProjectionHead>,
}

impl HandPoseNet {
    pub fn new(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let mut layout = ParamLayout::new();
        let fc = arch.feature_channels;
        let stem = Conv2d::new(&mut layout, "heatmap.stem", 3, arch.stem_channels, 4, 4, 0);
        let trunk = Conv2d::new(&mut layout, "heatmap.trunk", arch.stem_channels, fc, 3, 1, 1);
        let stage1 = Conv2d::new(&mut layout, "heatmap.stage1", fc, NUM_JOINTS, 1, 1, 0);
        let refine = (0..arch.refine_stages)
            .map(|s| {
                let name = format!("heatmap.refine{}", s + 1);
                (
                    Conv2d::new(&mut layout, &format!("{name}.conv"), fc + NUM_JOINTS, arch.refine_channels, 3, 1, 1),
                    Conv2d::new(&mut layout, &format!("{name}.out"), arch.refine_channels, NUM_JOINTS, 1, 1, 0),
                )
            })
            .collect();
        let prior_canonical =
            PriorStream::new(&mut layout, "poseprior.canonical", &arch, NUM_JOINTS * 3, 0.5, Init::Zeros);
        let prior_rotation =
            PriorStream::new(&mut layout, "poseprior.rotation", &arch, 9, 0.05, Init::Values(&IDENTITY9));
        let (branch2, head) = if arch.branch2 {
            let tap_channels = match arch.tap {
                TapPoint::Backbone => fc,
                TapPoint::FirstRefinement => arch.refine_channels,
            };
            let b2 = Branch2::new(&mut layout, &arch, tap_channels);
            let head = ProjectionHead {
                fc1: Linear::new(&mut layout, "head.fc1", CLIP_DIM, CLIP_DIM),
                fc2: Linear::with_init(&mut layout, "head.fc2", CLIP_DIM, ENCODING_DIM, 0.5, Init::Zeros),
            };
            (Some(b2), Some(head))
        } else {
            (None, None)
        };
        Ok(Self { arch, layout, stem, trunk, stage1, refine, prior_canonical, prior_rotation, branch2, head })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        self.layout.initialize(seed)
    }

    /// Whether a parameter belongs to Branch2 or the projection head.
    pub fn is_branch2_param(name: &str) -> bool {
        name.starts_with("branch2.") || name.starts_with("head.")
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.is_empty() {
            return Err(Error::Uninitialized);
        }
        if params.len() != self.layout.total() {
            return Err(shape_err(format!("{} parameters", self.layout.total()), params.len()));
        }
        Ok(())
    }

    fn heatmap_trace(&self, p: &[f64], image: &Image) -> Result<HeatmapTrace> {
        self.check_params(p)?;
        image.check_model_input()?;
        let l = &self.layout;
        let input = Fmap::from_vec(3, IMAGE_SIZE, IMAGE_SIZE, image.to_planar());
        let mut stem = self.stem.forward(l, p, &input);
        relu_inplace(&mut stem.data);
        let (pooled, pool_idx) = maxpool2(&stem);
        let mut feature = self.trunk.forward(l, p, &pooled);
        relu_inplace(&mut feature.data);
        let mut heatmaps = vec![self.stage1.forward(l, p, &feature)];
        let mut stage_inputs = Vec::with_capacity(self.refine.len());
        let mut stage_hidden = Vec::with_capacity(self.refine.len());
        for (conv, out) in &self.refine {
            let x = feature.concat(heatmaps.last().unwrap());
            let mut hidden = conv.forward(l, p, &x);
            relu_inplace(&mut hidden.data);
            heatmaps.push(out.forward(l, p, &hidden));
            stage_inputs.push(x);
            stage_hidden.push(hidden);
        }
        Ok(HeatmapTrace { input, stem, pool_idx, pooled, feature, stage_inputs, stage_hidden, heatmaps })
    }

    fn heatmap_backward(&self, p: &[f64], t: &HeatmapTrace, d_final: Fmap, d_tap: Option<Fmap>, g: &mut [f64]) {
        let l = &self.layout;
        let fc = self.arch.feature_channels;
        let mut d_feature = Fmap::zeros(fc, HEATMAP_SIZE, HEATMAP_SIZE);
        let mut dh = d_final;
        let mut d_tap = d_tap;
        for s in (0..self.refine.len()).rev() {
            let (conv, out) = &self.refine[s];
            let mut d_hidden = out.backward(l, p, &t.stage_hidden[s], &dh, g, true).unwrap();
            if s == 0 && self.arch.tap == TapPoint::FirstRefinement {
                if let Some(dt) = d_tap.take() {
                    d_hidden.add_assign(&dt);
                }
            }
            relu_backward(&t.stage_hidden[s].data, &mut d_hidden.data);
            let dx = conv.backward(l, p, &t.stage_inputs[s], &d_hidden, g, true).unwrap();
            let (df, dprev) = dx.split(fc);
            d_feature.add_assign(&df);
            dh = dprev;
        }
        let df = self.stage1.backward(l, p, &t.feature, &dh, g, true).unwrap();
        d_feature.add_assign(&df);
        if let Some(dt) = d_tap {
            d_feature.add_assign(&dt);
        }
        relu_backward(&t.feature.data, &mut d_feature.data);
        let d_pooled = self.trunk.backward(l, p, &t.pooled, &d_feature, g, true).unwrap();
        let mut d_stem = maxpool2_backward((t.stem.c, t.stem.h, t.stem.w), &t.pool_idx, &d_pooled);
        relu_backward(&t.stem.data, &mut d_stem.data);
        self.stem.backward(l, p, &t.input, &d_stem, g, false);
    }

    /// Heatmaps and the Branch2 input for one image.
    pub fn heatmap_forward(&self, params: &[f64], image: &Image) -> Result<(Heatmap, BackboneFeature)> {
        let t = self.heatmap_trace(params, image)?;
        let heatmap = Heatmap::from_vec(t.final_heatmap().data.clone())?;
        Ok((heatmap, BackboneFeature(t.tap(self.arch.tap).clone())))
    }

    fn branch2_parts(&self) -> Result<(&Branch2, &ProjectionHead)> {
        match (&self.branch2, &self.head) {
            (Some(b), Some(h)) => Ok((b, h)),
            _ => Err(Error::InvalidArgument("network was built without Branch2".into())),
        }
    }

    fn check_tap(&self, feat: &BackboneFeature) -> Result<()> {
        let (b2, _) = self.branch2_parts()?;
        let f = &feat.0;
        if (f.c, f.h, f.w) != (b2.conv1.in_c, HEATMAP_SIZE, HEATMAP_SIZE) {
            return Err(shape_err(
                format!("{}x{HEATMAP_SIZE}x{HEATMAP_SIZE} feature", b2.conv1.in_c),
                format!("{}x{}x{}", f.c, f.h, f.w),
            ));
        }
        Ok(())
    }

    pub fn branch2_plain(&self, params: &[f64], feat: &BackboneFeature) -> Result<IntermediateFeature> {
        self.check_params(params)?;
        self.check_tap(feat)?;
        let (b2, _) = self.branch2_parts()?;
        Ok(IntermediateFeature(b2.plain(&self.layout, params, &feat.0).2))
    }

    pub fn branch2_fused(
        &self,
        params: &[f64],
        feat: &BackboneFeature,
        clip: &ClipFeature,
        mode: FusionMode,
    ) -> Result<IntermediateFeature> {
        self.check_params(params)?;
        self.check_tap(feat)?;
        let (b2, _) = self.branch2_parts()?;
        if mode != b2.mode {
            return Err(Error::InvalidArgument(format!("network was built for {:?} fusion, got {mode:?}", b2.mode)));
        }
        let (_, _, plain) = b2.plain(&self.layout, params, &feat.0);
        Ok(IntermediateFeature(b2.fuse(&self.layout, params, &plain, clip.values()).2))
    }

    pub fn projection_head(&self, params: &[f64], e: &IntermediateFeature) -> Result<EncodingVector> {
        self.check_params(params)?;
        let (_, head) = self.branch2_parts()?;
        if e.0.len() != CLIP_DIM {
            return Err(shape_err(CLIP_DIM, e.0.len()));
        }
        Ok(EncodingVector(head.forward(&self.layout, params, &e.0).1))
    }

    fn prior_trace(&self, p: &[f64], h: &Fmap) -> PriorTrace {
        let canonical = self.prior_canonical.forward(&self.layout, p, h);
        let rotation = self.prior_rotation.forward(&self.layout, p, h);
        let m = Matrix3::from_row_slice(&rotation.out);
        let projection = project_to_so3(&m);
        PriorTrace { canonical, rotation, projection }
    }

    pub fn poseprior_forward(&self, params: &[f64], heatmap: &Heatmap) -> Result<(Pose3D, RotationMatrix)> {
        self.check_params(params)?;
        if heatmap.values().len() != HEATMAP_LEN {
            return Err(shape_err(HEATMAP_LEN, heatmap.values().len()));
        }
        let h = Fmap::from_vec(NUM_JOINTS, HEATMAP_SIZE, HEATMAP_SIZE, heatmap.values().to_vec());
        let t = self.prior_trace(params, &h);
        let canonical = Pose3D::from_flat(&t.canonical.out, 1.0)?;
        Ok((canonical, RotationMatrix::from_matrix(&t.projection.rotation)))
    }

    /// Test-time path: heatmap net Branch1, Poseprior, composition. Branch2
    /// and the CLIP encoders are never touched.
    pub fn predict(&self, params: &[f64], image: &Image) -> Result<Pose3D> {
        let (heatmap, _) = self.heatmap_forward(params, image)?;
        let (canonical, rotation) = self.poseprior_forward(params, &heatmap)?;
        Ok(compose_pose(&canonical, &rotation))
    }

    /// Full training forward for one sample. Branch2 runs when the network has
    /// it and a fused CLIP feature is supplied.
    pub fn forward_train(&self, params: &[f64], image: &Image, clip: Option<&ClipFeature>) -> Result<TrainTrace> {
        let heat = self.heatmap_trace(params, image)?;
        let prior = self.prior_trace(params, heat.final_heatmap());
        let canonical = Pose3D::from_flat(&prior.canonical.out, 1.0)?;
        let rotation = RotationMatrix::from_matrix(&prior.projection.rotation);
        let pose = compose_pose(&canonical, &rotation).flat();
        let (branch2, encodings) = match (clip, &self.branch2, &self.head) {
            (Some(clip), Some(b2), Some(head)) => {
                let (bt, fused) = b2.forward(&self.layout, params, heat.tap(self.arch.tap), clip.values());
                let (h1, e1) = head.forward(&self.layout, params, &bt.plain);
                let (h2, e2) = head.forward(&self.layout, params, &fused);
                (Some((bt, h1, h2)), Some((e1, e2)))
            }
            _ => (None, None),
        };
        Ok(TrainTrace { heat, prior, pose, branch2, encodings })
    }

    /// Accumulates parameter gradients of one sample into `grads`.
    pub fn backward_train(&self, params: &[f64], trace: &TrainTrace, d: &OutputGrads, grads: &mut [f64]) {
        let l = &self.layout;
        let prior = &trace.prior;

        let mut d_out = [[0.0; 3]; NUM_JOINTS];
        for (j, row) in d_out.iter_mut().enumerate() {
            row.copy_from_slice(&d.pose[3 * j..3 * j + 3]);
        }
        let mut canonical = [[0.0; 3]; NUM_JOINTS];
        for (j, row) in canonical.iter_mut().enumerate() {
            row.copy_from_slice(&prior.canonical.out[3 * j..3 * j + 3]);
        }
        let (d_can, d_rot) = compose_backward(&canonical, &prior.projection.rotation, &d_out);
        let d_m = prior.projection.backward(&d_rot);
        let d_m_flat: Vec<f64> = (0..9).map(|i| d_m[(i / 3, i % 3)]).collect();
        let d_can_flat: Vec<f64> = d_can.iter().flatten().copied().collect();

        let h = trace.heat.final_heatmap();
        let mut d_heat = Fmap::from_vec(NUM_JOINTS, HEATMAP_SIZE, HEATMAP_SIZE, d.heatmap.clone());
        let dh1 = self.prior_canonical.backward(l, params, h, &prior.canonical, &d_can_flat, grads);
        let dh2 = self.prior_rotation.backward(l, params, h, &prior.rotation, &d_m_flat, grads);
        d_heat.add_assign(&dh1);
        d_heat.add_assign(&dh2);

        let d_tap = match (&trace.branch2, &self.branch2, &self.head, &d.plain, &d.fused) {
            (Some((bt, h1, h2)), Some(b2), Some(head), Some(dp), Some(df)) => {
                let de1 = head.backward(l, params, h1, dp, grads);
                let de2 = head.backward(l, params, h2, df, grads);
                Some(b2.backward(l, params, trace.heat.tap(self.arch.tap), bt, &de1, &de2, grads))
            }
            _ => None,
        };
        self.heatmap_backward(params, &trace.heat, d_heat, d_tap, grads);
    }
}

/// Network definition plus a parameter vector.
#[derive(Debug, Clone)]
pub struct PoseModel {
    pub net: HandPoseNet,
    pub params: Vec<f64>,
}

impl PoseModel {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        let net = HandPoseNet::new(arch)?;
        let params = net.init_params(seed);
        Ok(Self { net, params })
    }

    /// A model whose parameters have not been loaded yet.
    pub fn uninitialized(arch: ArchConfig) -> Result<Self> {
        Ok(Self { net: HandPoseNet::new(arch)?, params: Vec::new() })
    }

    pub fn predict(&self, image: &Image) -> Result<Pose3D> {
        self.net.predict(&self.params, image)
    }
}
