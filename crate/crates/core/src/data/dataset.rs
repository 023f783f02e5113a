//! Datasets: synthetic manifests and adapters for FreiHAND, RHD and STB.
//!
//! Expected layouts under the dataset root:
//!
//! ```text
//! freihand/  {training,evaluation}_xyz.json   [[x,y,z] x 21] per sample, metres
//!            {training,evaluation}_K.json     3x3 intrinsics per sample
//!            {training,evaluation}/rgb/00000000.jpg
//! rhd/       {training,evaluation}/anno_{training,evaluation}.json
//!              { "<idx>": { "xyz": 42x3 metres, "uv_vis": 42x3, "K": 3x3 } }
//!            {training,evaluation}/color/00000.png
//! stb/       stb_labels.json
//!              { "sequences": [ { "name", "K": 3x3,
//!                  "frames": [ { "image": relative path, "joints_mm": 21x3 } ] } ] }
//! ```
//!
//! RHD stores each hand as wrist followed by fingers listed tip first; STB
//! stores palm, then little, ring, middle, index and thumb, base first. Both
//! are reordered into the joint order of [`crate::types`].

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::types::{Image, Pose3D, IMAGE_SIZE, NUM_JOINTS};

use super::sample::{Camera, Sample, SampleMeta};
use super::synth::{random_style, synth_sample, StyleParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Freihand,
    Stb,
    Rhd,
    Synth,
}

impl FromStr for DatasetFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "freihand" => Ok(Self::Freihand),
            "stb" => Ok(Self::Stb),
            "rhd" => Ok(Self::Rhd),
            "synth" | "synthetic" => Ok(Self::Synth),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" | "training" => Ok(Self::Train),
            "test" | "eval" | "evaluation" => Ok(Self::Test),
            other => Err(Error::InvalidArgument(format!("unknown split '{other}'"))),
        }
    }
}

/// STB sequences held out for testing.
pub const STB_TEST_SEQUENCES: [&str; 2] = ["B1Counting", "B1Random"];

/// `RHD_ORDER[j]` is the RHD per-hand index of joint `j`.
pub const RHD_ORDER: [usize; NUM_JOINTS] = rhd_order();

const fn rhd_order() -> [usize; NUM_JOINTS] {
    let mut out = [0; NUM_JOINTS];
    let mut f = 0;
    while f < 5 {
        let mut l = 0;
        while l < 4 {
            out[1 + 4 * f + l] = 1 + 4 * f + (3 - l);
            l += 1;
        }
        f += 1;
    }
    out
}

/// `STB_ORDER[j]` is the STB index of joint `j`.
pub const STB_ORDER: [usize; NUM_JOINTS] = [0, 17, 18, 19, 20, 13, 14, 15, 16, 9, 10, 11, 12, 5, 6, 7, 8, 1, 2, 3, 4];

#[derive(Debug, Clone, PartialEq)]
struct FileRecord {
    id: String,
    image: PathBuf,
    joints_mm: [[f64; 3]; NUM_JOINTS],
    k: [[f64; 3]; 3],
}

#[derive(Debug, Clone, PartialEq)]
enum Item {
    Synth { seed: u64, style: StyleParams },
    File(FileRecord),
    Memory(Box<Sample>),
}

#[derive(Debug, Clone)]
pub struct Dataset {
    name: String,
    items: Vec<Item>,
    cache: Option<Vec<Sample>>,
}

impl Dataset {
    /// Wraps samples that are already in memory.
    pub fn from_samples(name: impl Into<String>, samples: Vec<Sample>) -> Self {
        let items = samples.into_iter().map(|s| Item::Memory(Box::new(s))).collect();
        Dataset { name: name.into(), items, cache: None }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_materialized(&self) -> bool {
        self.cache.is_some()
    }

    /// Loads sample `i`, from memory if the dataset was materialized.
    pub fn get(&self, i: usize) -> Result<Sample> {
        if let Some(c) = &self.cache {
            return c.get(i).cloned().ok_or_else(|| out_of_range(i, c.len()));
        }
        match self.items.get(i).ok_or_else(|| out_of_range(i, self.items.len()))? {
            Item::Synth { seed, style } => synth_sample(*seed, style),
            Item::File(r) => load_file_record(r, &self.name),
            Item::Memory(s) => Ok((**s).clone()),
        }
    }

    /// Decodes every sample once and keeps it in memory.
    pub fn materialize(&mut self) -> Result<()> {
        if self.cache.is_none() {
            let samples = (0..self.items.len()).map(|i| self.get(i)).collect::<Result<Vec<_>>>()?;
            self.cache = Some(samples);
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut items = Vec::with_capacity(indices.len());
        for &i in indices {
            items.push(self.items.get(i).cloned().ok_or_else(|| out_of_range(i, self.items.len()))?);
        }
        let cache = self.cache.as_ref().map(|c| indices.iter().map(|&i| c[i].clone()).collect());
        Ok(Dataset { name: self.name.clone(), items, cache })
    }
}

fn out_of_range(i: usize, n: usize) -> Error {
    Error::InvalidArgument(format!("sample index {i} out of range for dataset of {n}"))
}

fn mix_seed(base: u64, i: u64) -> u64 {
    let mut z = base ^ i.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` procedurally generated samples with per-sample seeds and styles
/// derived from `seed`.
pub fn synth_dataset(n: usize, seed: u64) -> Dataset {
    let items = (0..n as u64)
        .map(|i| {
            let s = mix_seed(seed, i);
            Item::Synth { seed: s, style: random_style(s) }
        })
        .collect();
    Dataset { name: "synth".into(), items, cache: None }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    seed: u64,
    style: StyleParams,
    joints3d: Vec<f64>,
    scale_mm: f64,
    joints2d: Vec<f64>,
}

/// Writes one JSON line per synthetic sample: id, seed, style and labels.
pub fn write_synth_manifest(path: &Path, n: usize, seed: u64) -> Result<()> {
    let ds = synth_dataset(n, seed);
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in &ds.items {
        let Item::Synth { seed, style } = item else { unreachable!() };
        let s = synth_sample(*seed, style)?;
        let rec = ManifestRecord {
            id: s.meta.id.clone(),
            seed: *seed,
            style: *style,
            joints3d: s.joints3d.flat(),
            scale_mm: s.joints3d.scale,
            joints2d: s.joints2d.iter().flatten().copied().collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn load_synth_manifest(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| load_err(path, e.to_string()))?;
    let mut items = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| load_err(path, format!("record at line {}: {e}", n + 1)))?;
        if rec.joints3d.len() != NUM_JOINTS * 3 || rec.joints2d.len() != NUM_JOINTS * 2 {
            return Err(load_err(path, format!("record '{}': wrong number of joint values", rec.id)));
        }
        rec.style.validate().map_err(|e| load_err(path, format!("record '{}': {e}", rec.id)))?;
        items.push(Item::Synth { seed: rec.seed, style: rec.style });
    }
    Ok(Dataset { name: "synth".into(), items, cache: None })
}

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load { path: path.to_path_buf(), reason: reason.into() }
}

pub fn load_dataset(path: &Path, format: DatasetFormat, split: Split) -> Result<Dataset> {
    match format {
        DatasetFormat::Synth => load_synth_manifest(path),
        DatasetFormat::Freihand => load_freihand(path, split),
        DatasetFormat::Rhd => load_rhd(path, split),
        DatasetFormat::Stb => load_stb(path, split),
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| load_err(path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| load_err(path, e.to_string()))
}

fn rows<const N: usize>(v: &Value, rows: usize) -> Option<Vec<[f64; N]>> {
    let arr = v.as_array()?;
    if arr.len() != rows {
        return None;
    }
    arr.iter()
        .map(|r| {
            let r = r.as_array()?;
            if r.len() != N {
                return None;
            }
            let mut out = [0.0; N];
            for (o, x) in out.iter_mut().zip(r) {
                *o = x.as_f64().filter(|v| v.is_finite())?;
            }
            Some(out)
        })
        .collect()
}

fn matrix3(v: &Value) -> Option<[[f64; 3]; 3]> {
    let r = rows::<3>(v, 3)?;
    Some([r[0], r[1], r[2]])
}

fn split_dir(split: Split) -> &'static str {
    match split {
        Split::Train => "training",
        Split::Test => "evaluation",
    }
}

fn load_freihand(root: &Path, split: Split) -> Result<Dataset> {
    let name = split_dir(split);
    let xyz_path = root.join(format!("{name}_xyz.json"));
    let k_path = root.join(format!("{name}_K.json"));
    let xyz = read_json(&xyz_path)?;
    let ks = read_json(&k_path)?;
    let xyz = xyz.as_array().ok_or_else(|| load_err(&xyz_path, "expected a list of samples"))?;
    let ks = ks.as_array().ok_or_else(|| load_err(&k_path, "expected a list of matrices"))?;
    if xyz.len() != ks.len() {
        return Err(load_err(&k_path, format!("{} matrices for {} samples", ks.len(), xyz.len())));
    }
    let mut items = Vec::with_capacity(xyz.len());
    for (i, (j, k)) in xyz.iter().zip(ks).enumerate() {
        let joints =
            rows::<3>(j, NUM_JOINTS).ok_or_else(|| load_err(&xyz_path, format!("record {i}: expected 21x3 joints")))?;
        let k = matrix3(k).ok_or_else(|| load_err(&k_path, format!("record {i}: expected a 3x3 matrix")))?;
        let mut joints_mm = [[0.0; 3]; NUM_JOINTS];
        for (o, p) in joints_mm.iter_mut().zip(&joints) {
            *o = [p[0] * 1000.0, p[1] * 1000.0, p[2] * 1000.0];
        }
        items.push(Item::File(FileRecord {
            id: format!("{i:08}"),
            image: root.join(name).join("rgb").join(format!("{i:08}.jpg")),
            joints_mm,
            k,
        }));
    }
    Ok(Dataset { name: "freihand".into(), items, cache: None })
}

fn load_rhd(root: &Path, split: Split) -> Result<Dataset> {
    let name = split_dir(split);
    let anno_path = root.join(name).join(format!("anno_{name}.json"));
    let anno = read_json(&anno_path)?;
    let map = anno.as_object().ok_or_else(|| load_err(&anno_path, "expected an object keyed by sample index"))?;
    let mut keys: Vec<(u64, &String)> = map
        .keys()
        .map(|k| {
            k.parse::<u64>()
                .map(|n| (n, k))
                .map_err(|_| load_err(&anno_path, format!("record '{k}': key is not an index")))
        })
        .collect::<Result<_>>()?;
    keys.sort();
    let mut items = Vec::with_capacity(keys.len());
    for (idx, key) in keys {
        let rec = &map[key];
        let bad = |what: &str| load_err(&anno_path, format!("record '{key}': {what}"));
        let xyz = rows::<3>(&rec["xyz"], 2 * NUM_JOINTS).ok_or_else(|| bad("expected 42x3 'xyz'"))?;
        let uv = rows::<3>(&rec["uv_vis"], 2 * NUM_JOINTS).ok_or_else(|| bad("expected 42x3 'uv_vis'"))?;
        let k = matrix3(&rec["K"]).ok_or_else(|| bad("expected a 3x3 'K'"))?;
        let visible = |h: usize| uv[h * NUM_JOINTS..(h + 1) * NUM_JOINTS].iter().filter(|p| p[2] > 0.5).count();
        let hand = if visible(0) > visible(1) { 0 } else { 1 };
        let mut joints_mm = [[0.0; 3]; NUM_JOINTS];
        for (j, o) in joints_mm.iter_mut().enumerate() {
            let p = xyz[hand * NUM_JOINTS + RHD_ORDER[j]];
            *o = [p[0] * 1000.0, p[1] * 1000.0, p[2] * 1000.0];
        }
        items.push(Item::File(FileRecord {
            id: format!("{idx:05}"),
            image: root.join(name).join("color").join(format!("{idx:05}.png")),
            joints_mm,
            k,
        }));
    }
    Ok(Dataset { name: "rhd".into(), items, cache: None })
}

fn load_stb(root: &Path, split: Split) -> Result<Dataset> {
    let labels_path = root.join("stb_labels.json");
    let labels = read_json(&labels_path)?;
    let seqs = labels["sequences"].as_array().ok_or_else(|| load_err(&labels_path, "missing 'sequences' list"))?;
    let mut items = Vec::new();
    for (si, seq) in seqs.iter().enumerate() {
        let seq_name =
            seq["name"].as_str().ok_or_else(|| load_err(&labels_path, format!("sequence {si}: missing name")))?;
        let held_out = STB_TEST_SEQUENCES.contains(&seq_name);
        if held_out != (split == Split::Test) {
            continue;
        }
        let k = matrix3(&seq["K"])
            .ok_or_else(|| load_err(&labels_path, format!("sequence '{seq_name}': expected a 3x3 'K'")))?;
        let frames = seq["frames"]
            .as_array()
            .ok_or_else(|| load_err(&labels_path, format!("sequence '{seq_name}': missing frames")))?;
        for (fi, frame) in frames.iter().enumerate() {
            let id = format!("{seq_name}/{fi}");
            let bad = |what: &str| load_err(&labels_path, format!("record '{id}': {what}"));
            let image = frame["image"].as_str().ok_or_else(|| bad("missing 'image'"))?;
            let raw = rows::<3>(&frame["joints_mm"], NUM_JOINTS).ok_or_else(|| bad("expected 21x3 'joints_mm'"))?;
            let mut joints_mm = [[0.0; 3]; NUM_JOINTS];
            for (j, o) in joints_mm.iter_mut().enumerate() {
                *o = raw[STB_ORDER[j]];
            }
            items.push(Item::File(FileRecord { id, image: root.join(image), joints_mm, k }));
        }
    }
    Ok(Dataset { name: "stb".into(), items, cache: None })
}

fn load_file_record(r: &FileRecord, source: &str) -> Result<Sample> {
    let err = |reason: String| Error::Load { path: r.image.clone(), reason: format!("record '{}': {reason}", r.id) };
    let img = image::open(&r.image).map_err(|e| err(e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as f64, img.height() as f64);
    let [fx, fy, cx, cy] = [r.k[0][0], r.k[1][1], r.k[0][2], r.k[1][2]];
    let raw_cam = Camera { fx, fy, cx, cy, root_mm: [0.0; 3] };
    let mut uv = [[0.0; 2]; NUM_JOINTS];
    for (o, p) in uv.iter_mut().zip(&r.joints_mm) {
        if p[2] <= 0.0 {
            return Err(err("joint behind the camera".into()));
        }
        *o = raw_cam.project(p);
    }

    // Square crop around the hand, then resize to the model resolution.
    let side = w.min(h);
    let inside: Vec<&[f64; 2]> = uv.iter().filter(|p| p[0] >= 0.0 && p[0] < w && p[1] >= 0.0 && p[1] < h).collect();
    let (mx, my) = if inside.is_empty() {
        (w / 2.0, h / 2.0)
    } else {
        let (x0, x1) = inside.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |b, p| (b.0.min(p[0]), b.1.max(p[0])));
        let (y0, y1) = inside.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |b, p| (b.0.min(p[1]), b.1.max(p[1])));
        ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
    };
    let ox = (mx - side / 2.0).clamp(0.0, w - side).round();
    let oy = (my - side / 2.0).clamp(0.0, h - side).round();
    let cropped = image::imageops::crop_imm(&img, ox as u32, oy as u32, side as u32, side as u32).to_image();
    let resized =
        image::imageops::resize(&cropped, IMAGE_SIZE as u32, IMAGE_SIZE as u32, image::imageops::FilterType::Triangle);
    let s = IMAGE_SIZE as f64 / side;

    let camera = Camera { fx: fx * s, fy: fy * s, cx: (cx - ox) * s, cy: (cy - oy) * s, root_mm: r.joints_mm[0] };
    let mut joints2d = [[0.0; 2]; NUM_JOINTS];
    for (o, p) in joints2d.iter_mut().zip(&uv) {
        *o = [(p[0] - ox) * s, (p[1] - oy) * s];
    }
    let joints3d = Pose3D::from_absolute(&r.joints_mm).map_err(|e| err(e.to_string()))?;
    let image = Image::new(IMAGE_SIZE, IMAGE_SIZE, resized.into_raw())?;
    Ok(Sample {
        image,
        joints3d,
        joints2d,
        meta: SampleMeta { source: source.to_string(), id: r.id.clone(), camera: Some(camera) },
    })
}
