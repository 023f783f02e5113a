//! Procedural hand renderer used as the synthetic source domain.
//!
//! A 21-joint kinematic hand is articulated from a few latent angles, rotated
//! within a limited range of viewpoints, placed 0.4 to 0.6 m in front of a
//! pinhole camera and painted over a background chosen from the prompt
//! vocabulary's color words.

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{PromptConfig, BACKGROUNDS, COLORS, HAND_COLORS};
use crate::types::{Image, Pose3D, IMAGE_SIZE, NUM_JOINTS};

use super::palette::{COLOR_RGB, HAND_RGB};
use super::sample::{Camera, Sample, SampleMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Solid,
    Gradient,
    Texture,
}

/// Appearance of one synthetic image. Indices point into the prompt
/// vocabulary's hand-color and color lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleParams {
    pub hand_color: usize,
    pub background_color: usize,
    /// Second background color for gradients and textures; a darker shade
    /// of the main color when absent.
    pub secondary_color: Option<usize>,
    pub kind: BackgroundKind,
}

impl Default for StyleParams {
    fn default() -> Self {
        Self { hand_color: 2, background_color: 14, secondary_color: None, kind: BackgroundKind::Solid }
    }
}

impl StyleParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.hand_color < HAND_COLORS.len()
            && self.background_color < COLORS.len()
            && self.secondary_color.map_or(true, |c| c < COLORS.len());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("style index out of range: {self:?}")))
        }
    }

    /// Style that matches what a prompt describes.
    pub fn from_prompt(cfg: &PromptConfig) -> Self {
        let word = COLORS[cfg.color];
        let kind = match word {
            "dotted" | "flower" | "mountain" | "lake" => BackgroundKind::Texture,
            _ if BACKGROUNDS[cfg.background] == "room" => BackgroundKind::Gradient,
            _ => BackgroundKind::Solid,
        };
        Self { hand_color: cfg.hand_color, background_color: cfg.color, secondary_color: None, kind }
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        let kind = match rng.gen_range(0..3) {
            0 => BackgroundKind::Solid,
            1 => BackgroundKind::Gradient,
            _ => BackgroundKind::Texture,
        };
        let background_color = rng.gen_range(0..COLORS.len());
        let secondary = rng.gen_range(0..COLORS.len());
        Self {
            hand_color: rng.gen_range(0..HAND_COLORS.len()),
            background_color,
            secondary_color: (secondary != background_color && rng.gen_bool(0.5)).then_some(secondary),
            kind,
        }
    }

    pub fn describe(&self) -> String {
        format!("{} hand, {} {:?} background", HAND_COLORS[self.hand_color], COLORS[self.background_color], self.kind)
            .to_lowercase()
    }
}

/// Seeded style draw, independent of the pose draw for the same seed.
pub fn random_style(seed: u64) -> StyleParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5354_594c_455f_5345);
    StyleParams::random(&mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub focal: f64,
    pub depth_mm: (f64, f64),
    pub roll_deg: f64,
    pub pitch_deg: f64,
    pub yaw_deg: f64,
    pub hand_scale: (f64, f64),
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            focal: 420.0,
            depth_mm: (450.0, 550.0),
            roll_deg: 45.0,
            pitch_deg: 30.0,
            yaw_deg: 30.0,
            hand_scale: (0.9, 1.1),
            noise_std: 3.0,
        }
    }
}

pub fn synth_sample(seed: u64, style: &StyleParams) -> Result<Sample> {
    synth_sample_with(seed, style, &SynthConfig::default())
}

pub fn synth_sample_with(seed: u64, style: &StyleParams, cfg: &SynthConfig) -> Result<Sample> {
    Ok(render(seed, style, cfg)?.0)
}

const MARGIN_PX: f64 = 6.0;

struct Finger {
    base: [f64; 3],
    splay_deg: f64,
    lengths: [f64; 3],
}

const FINGERS: [Finger; 4] = [
    Finger { base: [24.0, 84.0, 0.0], splay_deg: 8.0, lengths: [42.0, 25.0, 21.0] },
    Finger { base: [3.0, 88.0, 0.0], splay_deg: 0.0, lengths: [46.0, 29.0, 23.0] },
    Finger { base: [-15.0, 82.0, 0.0], splay_deg: -8.0, lengths: [43.0, 27.0, 22.0] },
    Finger { base: [-30.0, 72.0, 0.0], splay_deg: -18.0, lengths: [34.0, 21.0, 19.0] },
];
const THUMB_CMC: [f64; 3] = [18.0, 22.0, 4.0];
const THUMB_LENGTHS: [f64; 3] = [38.0, 32.0, 27.0];

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Joint positions in the hand frame (mm): wrist at the origin, fingers
/// along +y, thumb towards +x, palm normal +z.
fn articulate(rng: &mut ChaCha8Rng, scale: f64) -> [Vector3<f64>; NUM_JOINTS] {
    let noise = Normal::new(0.0, 1.0).unwrap();
    let grasp: f64 = rng.gen_range(0.0..1.0);
    let mut joints = [Vector3::zeros(); NUM_JOINTS];
    let z = Vector3::z();

    let g_t = (grasp + 0.25 * noise.sample(rng)).clamp(0.0, 1.0);
    let tilt = 35f64.to_radians();
    let spread = (45.0 + 10.0 * noise.sample(rng)).to_radians();
    let d0 = Vector3::new(spread.sin(), spread.cos(), 0.0) * tilt.cos() + z * tilt.sin();
    let toward = Vector3::new(-1.0, 0.3, 0.6);
    let n = (toward - d0 * toward.dot(&d0)).normalize();
    let thumb_flex = [lerp(0.0, 30.0, g_t), lerp(0.0, 40.0, g_t), lerp(5.0, 55.0, g_t)];
    let mut p = Vector3::from(THUMB_CMC) * scale;
    joints[1] = p;
    let mut phi = 0.0f64;
    for k in 0..3 {
        phi += thumb_flex[k].to_radians();
        p += (d0 * phi.cos() + n * phi.sin()) * THUMB_LENGTHS[k] * scale;
        joints[2 + k] = p;
    }

    for (f, finger) in FINGERS.iter().enumerate() {
        let g = (grasp + 0.25 * noise.sample(rng)).clamp(0.0, 1.0);
        let theta = (finger.splay_deg * (1.0 - 0.6 * g) + 4.0 * noise.sample(rng)).to_radians();
        let d0 = Vector3::new(theta.sin(), theta.cos(), 0.0);
        let flex = [lerp(-5.0, 70.0, g), lerp(0.0, 90.0, g), lerp(0.0, 60.0, g)];
        let base = 5 + 4 * f;
        let mut p = Vector3::from(finger.base) * scale;
        joints[base] = p;
        let mut phi = 0.0f64;
        for k in 0..3 {
            phi += flex[k].to_radians();
            p += (d0 * phi.cos() + z * phi.sin()) * finger.lengths[k] * scale;
            joints[base + 1 + k] = p;
        }
    }
    joints
}

pub(crate) fn render(seed: u64, style: &StyleParams, cfg: &SynthConfig) -> Result<(Sample, Vec<bool>)> {
    style.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = rng.gen_range(cfg.hand_scale.0..=cfg.hand_scale.1);
    let local = articulate(&mut rng, scale);

    // Palm facing the camera, fingers up: hand x -> camera x, y -> -y, z -> -z.
    let base = Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)));
    let roll = rng.gen_range(-cfg.roll_deg..=cfg.roll_deg).to_radians();
    let pitch = rng.gen_range(-cfg.pitch_deg..=cfg.pitch_deg).to_radians();
    let yaw = rng.gen_range(-cfg.yaw_deg..=cfg.yaw_deg).to_radians();
    let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), roll)
        * Rotation3::from_axis_angle(&Vector3::x_axis(), pitch)
        * Rotation3::from_axis_angle(&Vector3::y_axis(), yaw)
        * base;
    let centroid = local.iter().fold(Vector3::zeros(), |a, p| a + p) / NUM_JOINTS as f64;
    let centered: Vec<Vector3<f64>> = local.iter().map(|p| rot * (p - centroid)).collect();

    let c = IMAGE_SIZE as f64 / 2.0;
    let mut depth = rng.gen_range(cfg.depth_mm.0..=cfg.depth_mm.1);
    let mut shift = [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)];
    let (abs, joints2d, cam) = loop {
        let abs: Vec<[f64; 3]> = centered.iter().map(|p| [p.x + shift[0], p.y + shift[1], p.z + depth]).collect();
        let cam = Camera { fx: cfg.focal, fy: cfg.focal, cx: c, cy: c, root_mm: abs[0] };
        let mut j2 = [[0.0; 2]; NUM_JOINTS];
        for (o, p) in j2.iter_mut().zip(&abs) {
            *o = cam.project(p);
        }
        let hi = IMAGE_SIZE as f64 - MARGIN_PX;
        if j2.iter().all(|p| p[0] >= MARGIN_PX && p[0] <= hi && p[1] >= MARGIN_PX && p[1] <= hi) {
            break (abs, j2, cam);
        }
        shift = [shift[0] * 0.5, shift[1] * 0.5];
        depth += 40.0;
    };
    let mut abs_arr = [[0.0; 3]; NUM_JOINTS];
    abs_arr.copy_from_slice(&abs);
    let joints3d = Pose3D::from_absolute(&abs_arr)?;

    let mut canvas = Canvas::new();
    paint_background(&mut canvas, style, &mut rng);
    let mask = paint_hand(&mut canvas, &abs_arr, &joints2d, HAND_RGB[style.hand_color], cfg.focal);
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).unwrap();
    let mut data = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE * 3);
    for v in canvas.px.iter() {
        let n = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        data.push((v + n).round().clamp(0.0, 255.0) as u8);
    }
    let image = Image::new(IMAGE_SIZE, IMAGE_SIZE, data)?;
    let meta = SampleMeta { source: "synth".into(), id: format!("synth-{seed}"), camera: Some(cam) };
    Ok((Sample { image, joints3d, joints2d, meta }, mask))
}

struct Canvas {
    px: Vec<f64>,
}

impl Canvas {
    fn new() -> Self {
        Self { px: vec![0.0; IMAGE_SIZE * IMAGE_SIZE * 3] }
    }

    fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * IMAGE_SIZE + x) * 3;
        self.px[i..i + 3].copy_from_slice(&rgb);
    }

    fn blend(&mut self, x: usize, y: usize, rgb: [f64; 3], alpha: f64) {
        let i = (y * IMAGE_SIZE + x) * 3;
        for k in 0..3 {
            self.px[i + k] = self.px[i + k] * (1.0 - alpha) + rgb[k] * alpha;
        }
    }
}

fn rgbf(c: [u8; 3]) -> [f64; 3] {
    [c[0] as f64, c[1] as f64, c[2] as f64]
}

fn shade(c: [f64; 3], k: f64) -> [f64; 3] {
    [(c[0] * k).min(255.0), (c[1] * k).min(255.0), (c[2] * k).min(255.0)]
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [lerp(a[0], b[0], t), lerp(a[1], b[1], t), lerp(a[2], b[2], t)]
}

fn paint_background(canvas: &mut Canvas, style: &StyleParams, rng: &mut ChaCha8Rng) {
    let main = rgbf(COLOR_RGB[style.background_color]);
    let second = style.secondary_color.map_or(shade(main, 0.55), |c| rgbf(COLOR_RGB[c]));
    let n = IMAGE_SIZE as f64;
    match style.kind {
        BackgroundKind::Solid => {
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    canvas.set(x, y, main);
                }
            }
        }
        BackgroundKind::Gradient => {
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (a.cos(), a.sin());
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    let t = ((x as f64 / n - 0.5) * dx + (y as f64 / n - 0.5) * dy) / std::f64::consts::SQRT_2 + 0.5;
                    canvas.set(x, y, mix(main, second, t.clamp(0.0, 1.0)));
                }
            }
        }
        BackgroundKind::Texture => {
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let period: f64 = rng.gen_range(14.0..34.0);
            let word = COLORS[style.background_color];
            let contrast = style.secondary_color.map_or(shade(main, 0.45), |c| rgbf(COLOR_RGB[c]));
            let flowers: Vec<(f64, f64, f64)> = (0..rng.gen_range(6..14))
                .map(|_| (rng.gen_range(0.0..n), rng.gen_range(0.0..n), rng.gen_range(8.0..18.0)))
                .collect();
            let peaks: Vec<(f64, f64)> =
                (0..rng.gen_range(2..5)).map(|_| (rng.gen_range(0.0..n), rng.gen_range(0.25 * n..0.6 * n))).collect();
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                    let on = match word {
                        "dotted" => {
                            let (u, v) = ((fx / period).fract() - 0.5, (fy / period).fract() - 0.5);
                            u * u + v * v < 0.06
                        }
                        "flower" => flowers.iter().any(|&(cx, cy, r)| {
                            let (dx, dy) = (fx - cx, fy - cy);
                            let ang = dy.atan2(dx);
                            (dx * dx + dy * dy).sqrt() < r * (0.55 + 0.45 * (5.0 * ang + phase).cos().abs())
                        }),
                        "mountain" => peaks.iter().any(|&(px, py)| fy > py + (fx - px).abs() * 0.9),
                        "lake" => fy > n * 0.45 + 6.0 * (fx / period + phase).sin(),
                        _ => ((fx + fy) / period + phase).sin() > 0.0,
                    };
                    canvas.set(x, y, if on { contrast } else { main });
                }
            }
        }
    }
}

fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * abx + (p[1] - a[1]) * aby) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (p[0] - a[0] - t * abx, p[1] - a[1] - t * aby);
    (dx * dx + dy * dy).sqrt()
}

fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

enum Shape {
    Capsule { a: [f64; 2], b: [f64; 2], r: f64 },
    Polygon(Vec<[f64; 2]>),
    Disc { c: [f64; 2], r: f64 },
}

impl Shape {
    /// Signed distance-like value: negative inside, pixels outside.
    fn distance(&self, p: [f64; 2]) -> f64 {
        match self {
            Shape::Capsule { a, b, r } => seg_dist(p, *a, *b) - r,
            Shape::Disc { c, r } => ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() - r,
            Shape::Polygon(v) => {
                let n = v.len();
                let mut inside = true;
                let mut d = f64::INFINITY;
                for i in 0..n {
                    let (a, b) = (v[i], v[(i + 1) % n]);
                    d = d.min(seg_dist(p, a, b));
                    if (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) < 0.0 {
                        inside = false;
                    }
                }
                if inside {
                    -d
                } else {
                    d
                }
            }
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        match self {
            Shape::Capsule { a, b, r } => {
                (a[0].min(b[0]) - r, a[1].min(b[1]) - r, a[0].max(b[0]) + r, a[1].max(b[1]) + r)
            }
            Shape::Disc { c, r } => (c[0] - r, c[1] - r, c[0] + r, c[1] + r),
            Shape::Polygon(v) => {
                v.iter().fold((f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY), |b, p| {
                    (b.0.min(p[0]), b.1.min(p[1]), b.2.max(p[0]), b.3.max(p[1]))
                })
            }
        }
    }
}

fn fill(canvas: &mut Canvas, mask: &mut [bool], shape: &Shape, color: [f64; 3], outline: Option<[f64; 3]>) {
    let (x0, y0, x1, y1) = shape.bounds();
    let lo = |v: f64| (v - 2.0).floor().clamp(0.0, (IMAGE_SIZE - 1) as f64) as usize;
    for y in lo(y0)..=lo(y1 + 4.0) {
        for x in lo(x0)..=lo(x1 + 4.0) {
            let d = shape.distance([x as f64 + 0.5, y as f64 + 0.5]);
            let alpha = (0.5 - d).clamp(0.0, 1.0);
            if alpha <= 0.0 {
                continue;
            }
            let c = match outline {
                Some(o) if d > -1.5 => o,
                _ => color,
            };
            canvas.blend(x, y, c, alpha);
            if alpha > 0.0 {
                mask[y * IMAGE_SIZE + x] = true;
            }
        }
    }
}

fn paint_hand(
    canvas: &mut Canvas,
    abs: &[[f64; 3]; NUM_JOINTS],
    j2: &[[f64; 2]; NUM_JOINTS],
    skin: [u8; 3],
    focal: f64,
) -> Vec<bool> {
    let skin = rgbf(skin);
    let (zmin, zmax) = abs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |b, p| (b.0.min(p[2]), b.1.max(p[2])));
    let lit = |z: f64| 1.12 - 0.3 * (z - zmin) / (zmax - zmin + 1e-9);
    let px = |mm: f64, z: f64| mm * focal / z;

    // (depth, shape, color, outline)
    let mut items: Vec<(f64, Shape, [f64; 3], Option<[f64; 3]>)> = Vec::new();
    let palm_ids = [0usize, 1, 5, 9, 13, 17];
    let palm_z = palm_ids.iter().map(|&i| abs[i][2]).sum::<f64>() / palm_ids.len() as f64;
    let palm = convex_hull(palm_ids.iter().map(|&i| j2[i]).collect());
    items.push((palm_z + 15.0, Shape::Polygon(palm), shade(skin, lit(palm_z) * 0.95), None));
    items.push((
        abs[0][2] + 10.0,
        Shape::Disc { c: j2[0], r: px(24.0, abs[0][2]) },
        shade(skin, lit(abs[0][2]) * 0.9),
        None,
    ));
    for f in 0..5 {
        let base = 1 + 4 * f;
        for k in 0..4 {
            let (a, b) = if k == 0 {
                if f == 0 {
                    (0, 1)
                } else {
                    continue;
                }
            } else {
                (base + k - 1, base + k)
            };
            let z = 0.5 * (abs[a][2] + abs[b][2]);
            let radius = if f == 0 { 10.0 - k as f64 } else { 9.0 - 0.7 * k as f64 };
            let color = shade(skin, lit(z));
            items.push((z, Shape::Capsule { a: j2[a], b: j2[b], r: px(radius, z) }, color, Some(shade(color, 0.72))));
        }
        let tip = base + 3;
        items.push((
            abs[tip][2] - 1.0,
            Shape::Disc { c: j2[tip], r: px(4.5, abs[tip][2]) },
            mix(shade(skin, lit(abs[tip][2])), [250.0, 235.0, 235.0], 0.5),
            None,
        ));
    }
    for j in 1..NUM_JOINTS {
        if (j - 1) % 4 == 3 {
            continue;
        }
        items.push((
            abs[j][2] - 0.5,
            Shape::Disc { c: j2[j], r: px(2.5, abs[j][2]) },
            shade(skin, lit(abs[j][2]) * 0.7),
            None,
        ));
    }
    items.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut mask = vec![false; IMAGE_SIZE * IMAGE_SIZE];
    for (_, shape, color, outline) in &items {
        fill(canvas, &mut mask, shape, *color, *outline);
    }
    mask
}
