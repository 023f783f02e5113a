//! Similarity ranking and embedding export over CLIP-space features.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cache::FeatureCache;
use crate::clip::{fuse, ClipEncoder, ClipFeature, FusionConfig};
use crate::error::{shape_err, Error, Result};
use crate::prompt::Prompt;
use crate::types::{Image, CLIP_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub sample_id: String,
    pub tag: String,
    #[serde(rename = "vector")]
    pub feature: Vec<f64>,
}

impl FeatureRecord {
    pub fn new(sample_id: impl Into<String>, feature: Vec<f64>, tag: impl Into<String>) -> Result<Self> {
        let r = Self { sample_id: sample_id.into(), tag: tag.into(), feature };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature.len() != CLIP_DIM {
            return Err(shape_err(CLIP_DIM, self.feature.len()));
        }
        if self.feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature of {}", self.sample_id)));
        }
        if self.tag.is_empty() {
            return Err(Error::InvalidArgument(format!("record {} has an empty tag", self.sample_id)));
        }
        Ok(())
    }
}

/// All records of a feature cache under one tag.
pub fn records_from_cache(cache: &FeatureCache, tag: &str) -> Result<Vec<FeatureRecord>> {
    cache.iter().map(|(id, v)| FeatureRecord::new(id, v.iter().map(|&x| x as f64).collect(), tag)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub sample_id: String,
    pub score: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norm(a) * norm(b))
}

/// Gallery records sorted by descending cosine similarity to `query`, ties
/// broken by ascending sample id. Zero-norm records are skipped.
pub fn rank_by_similarity(query: &ClipFeature, gallery: &[FeatureRecord]) -> Result<Vec<Ranked>> {
    rank_excluding(query, gallery, None)
}

/// Same as [`rank_by_similarity`] with one sample id left out of the gallery.
pub fn rank_excluding(query: &ClipFeature, gallery: &[FeatureRecord], exclude: Option<&str>) -> Result<Vec<Ranked>> {
    if gallery.is_empty() {
        return Err(Error::InvalidArgument("empty gallery".into()));
    }
    let qn = norm(query.values());
    if qn == 0.0 {
        return Err(Error::InvalidArgument("query feature has zero norm".into()));
    }
    let mut out = Vec::with_capacity(gallery.len());
    for r in gallery {
        if Some(r.sample_id.as_str()) == exclude {
            continue;
        }
        if r.feature.len() != query.values().len() {
            return Err(shape_err(query.values().len(), r.feature.len()));
        }
        if norm(&r.feature) == 0.0 {
            log::warn!("skipping zero-norm gallery record {}", r.sample_id);
            continue;
        }
        out.push(Ranked { sample_id: r.sample_id.clone(), score: cosine(query.values(), &r.feature) });
    }
    out.sort_by(|a, b| {
        b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    Ok(out)
}

/// `weight * f_image + (1 - weight) * f_text` on the raw encoder outputs.
pub fn build_aug_feature(
    encoder: &dyn ClipEncoder,
    image: &Image,
    prompt: &Prompt,
    weight: f64,
) -> Result<ClipFeature> {
    let img = encoder.encode_image(image)?;
    let txt = encoder.encode_text(&prompt.text)?;
    fuse(&img, &txt, FusionConfig { image_ratio: weight, normalize_inputs: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    None,
    Pca2d,
}

impl std::str::FromStr for Projection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "pca2d" => Ok(Self::Pca2d),
            other => Err(Error::InvalidArgument(format!("unknown projection '{other}' (expected none or pca2d)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca2d {
    /// Two unit principal axes in feature space.
    pub axes: [Vec<f64>; 2],
    pub coords: Vec<[f64; 2]>,
    pub explained_variance_ratio: [f64; 2],
}

/// Top-2 principal components of the mean-centred rows. Each axis is signed
/// so that its largest-magnitude entry is positive.
pub fn pca2d(rows: &[Vec<f64>]) -> Result<Pca2d> {
    if rows.len() < 2 {
        return Err(Error::InvalidArgument("pca2d needs at least two records".into()));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidArgument("records have different dimensions".into()));
    }
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    // Eigen-decompose whichever Gram matrix is smaller.
    let (values, axes_fs): (Vec<f64>, Vec<Vec<f64>>) = if n <= d {
        let g = &x * x.transpose();
        let eig = SymmetricEigen::new(g);
        let order = sorted_desc(eig.eigenvalues.as_slice());
        let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let axes = order
            .iter()
            .take(2)
            .map(|&i| {
                let v = x.transpose() * eig.eigenvectors.column(i);
                let nv = v.norm();
                if nv > 0.0 {
                    (v / nv).iter().copied().collect()
                } else {
                    vec![0.0; d]
                }
            })
            .collect();
        (vals, axes)
    } else {
        let c = x.transpose() * &x;
        let eig = SymmetricEigen::new(c);
        let order = sorted_desc(eig.eigenvalues.as_slice());
        let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let axes = order.iter().take(2).map(|&i| eig.eigenvectors.column(i).iter().copied().collect()).collect();
        (vals, axes)
    };
    let total: f64 = values.iter().sum();
    let scale = values.first().copied().unwrap_or(0.0).max(1.0);
    if !(total > 1e-12 * scale) || values[0] <= 0.0 {
        return Err(Error::InvalidArgument("feature matrix has rank 0; nothing to project".into()));
    }
    let second = values.get(1).copied().unwrap_or(0.0);
    let rank_one = second <= 1e-12 * values[0];
    let mut axes: [Vec<f64>; 2] = [axes_fs[0].clone(), axes_fs.get(1).cloned().unwrap_or_else(|| vec![0.0; d])];
    if rank_one {
        axes[1] = vec![0.0; d];
    }
    for a in axes.iter_mut() {
        let big = a.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if big < 0.0 {
            a.iter_mut().for_each(|v| *v = -*v);
        }
    }
    let coords = (0..n)
        .map(|i| {
            let row = x.row(i);
            let p = |a: &[f64]| row.iter().zip(a).map(|(u, v)| u * v).sum::<f64>();
            [p(&axes[0]), p(&axes[1])]
        })
        .collect();
    let ratio = [values[0] / total, if rank_one { 0.0 } else { second / total }];
    Ok(Pca2d { axes, coords, explained_variance_ratio: ratio })
}

fn sorted_desc(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    projection: Projection,
    dim: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    explained_variance_ratio: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PointRecord {
    sample_id: String,
    tag: String,
    vector: Vec<f64>,
}

/// Contents of an embedding file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub projection: Projection,
    pub explained_variance_ratio: Option<[f64; 2]>,
    pub records: Vec<FeatureRecord>,
}

/// Writes a header line followed by one JSON line per record with its id,
/// tag and vector (512 values, or 2 for `pca2d`).
pub fn export_embeddings<W: Write>(records: &[FeatureRecord], projection: Projection, mut w: W) -> Result<()> {
    for r in records {
        r.validate()?;
    }
    let (header, vectors): (Header, Vec<Vec<f64>>) = match projection {
        Projection::None => (
            Header { projection, dim: CLIP_DIM, explained_variance_ratio: None },
            records.iter().map(|r| r.feature.clone()).collect(),
        ),
        Projection::Pca2d => {
            let rows: Vec<Vec<f64>> = records.iter().map(|r| r.feature.clone()).collect();
            let p = pca2d(&rows)?;
            (
                Header { projection, dim: 2, explained_variance_ratio: Some(p.explained_variance_ratio) },
                p.coords.iter().map(|c| c.to_vec()).collect(),
            )
        }
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (r, v) in records.iter().zip(vectors) {
        serde_json::to_writer(&mut w, &PointRecord { sample_id: r.sample_id.clone(), tag: r.tag.clone(), vector: v })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_embeddings_to(records: &[FeatureRecord], projection: Projection, path: &Path) -> Result<()> {
    export_embeddings(records, projection, BufWriter::new(File::create(path)?))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingFile> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header: Header = match lines.next() {
        Some(l) => serde_json::from_str(&l?)?,
        None => return Err(Error::Load { path: path.to_path_buf(), reason: "empty embedding file".into() }),
    };
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PointRecord = serde_json::from_str(&line)?;
        if p.vector.len() != header.dim {
            return Err(Error::Load {
                path: path.to_path_buf(),
                reason: format!("record {}: wrong dimension", p.sample_id),
            });
        }
        records.push(FeatureRecord { sample_id: p.sample_id, tag: p.tag, feature: p.vector });
    }
    Ok(EmbeddingFile {
        projection: header.projection,
        explained_variance_ratio: header.explained_variance_ratio,
        records,
    })
}

/// Tiles images left to right, top to bottom, `cols` per row.
pub fn contact_sheet(images: &[Image], cols: usize) -> Result<Image> {
    if images.is_empty() || cols == 0 {
        return Err(Error::InvalidArgument("contact sheet needs images and at least one column".into()));
    }
    let (w, h) = (images[0].width(), images[0].height());
    if images.iter().any(|i| i.width() != w || i.height() != h) {
        return Err(Error::InvalidArgument("contact sheet images must share a size".into()));
    }
    let rows = images.len().div_ceil(cols);
    let mut sheet = Image::filled(w * cols.min(images.len()), h * rows, [255, 255, 255]);
    for (k, img) in images.iter().enumerate() {
        let (ox, oy) = ((k % cols) * w, (k / cols) * h);
        for y in 0..h {
            for x in 0..w {
                sheet.set_pixel(ox + x, oy + y, img.pixel(x, y));
            }
        }
    }
    Ok(sheet)
}
