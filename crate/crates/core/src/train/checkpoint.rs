//! Checkpoint container.
//!
//! ```text
//! magic     b"CDGK"
//! version   u32 (= 1)
//! meta_len  u64, then meta_len bytes of JSON (CheckpointMeta)
//! count     u32
//! count x { name_len u32, name, dtype u8 (0 = f32, 1 = f64),
//!           ndim u32, ndim x u64 dims, payload little-endian }
//! ```
//!
//! Model tensors are stored as `param/<name>` in f32. A checkpoint written
//! during training also carries `resume/params`, `resume/adam_m` and
//! `resume/adam_v` in f64 so a resumed run continues bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchConfig, HandPoseNet, PoseModel};

use super::config::TrainConfig;
use super::optim::AdamState;

const MAGIC: &[u8; 4] = b"CDGK";
const VERSION: u32 = 1;

/// Serialized position of the trainer's ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ArchConfig,
    pub arch_fingerprint: String,
    pub train_config: Option<TrainConfig>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub adam_t: u64,
    pub rng: Option<RngState>,
    pub val_epe_mm: Option<f64>,
    pub clip_checksum: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Payload,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<Tensor>,
}

/// Optimizer-side state restored from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ResumeState {
    pub params: Vec<f64>,
    pub adam: AdamState,
}

impl Checkpoint {
    /// Snapshot of a model, optionally with the exact optimizer state.
    pub fn from_model(model: &PoseModel, meta: CheckpointMeta, adam: Option<&AdamState>) -> Self {
        let layout = model.net.layout();
        let mut tensors: Vec<Tensor> = layout
            .specs()
            .iter()
            .map(|s| Tensor {
                name: format!("param/{}", s.name),
                shape: s.shape.clone(),
                data: Payload::F32(model.params[s.offset..s.offset + s.len].iter().map(|&v| v as f32).collect()),
            })
            .collect();
        if let Some(adam) = adam {
            let n = model.params.len();
            for (name, v) in [("resume/params", &model.params), ("resume/adam_m", &adam.m), ("resume/adam_v", &adam.v)]
            {
                tensors.push(Tensor { name: name.into(), shape: vec![n], data: Payload::F64(v.clone()) });
            }
        }
        Self { meta, tensors }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Rebuilds the network. Uses the f64 master copy when present so that
    /// evaluation sees exactly the parameters training ended with.
    pub fn model(&self) -> Result<PoseModel> {
        let net = HandPoseNet::new(self.meta.arch.clone())?;
        let fingerprint = net.layout().fingerprint();
        if fingerprint != self.meta.arch_fingerprint {
            return Err(Error::Checkpoint(format!(
                "architecture fingerprint mismatch: checkpoint {}, config {fingerprint}",
                self.meta.arch_fingerprint
            )));
        }
        if let Some(Payload::F64(v)) = self.tensor("resume/params").map(|t| &t.data) {
            if v.len() != net.layout().total() {
                return Err(Error::Checkpoint("resume/params has the wrong length".into()));
            }
            return Ok(PoseModel { net, params: v.clone() });
        }
        let mut params = vec![0.0; net.layout().total()];
        for s in net.layout().specs() {
            let name = format!("param/{}", s.name);
            let t = self.tensor(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape != s.shape {
                return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {:?}", t.shape, s.shape)));
            }
            match &t.data {
                Payload::F32(v) => {
                    params[s.offset..s.offset + s.len].iter_mut().zip(v).for_each(|(p, &x)| *p = x as f64)
                }
                Payload::F64(v) => params[s.offset..s.offset + s.len].copy_from_slice(v),
            }
        }
        Ok(PoseModel { net, params })
    }

    pub fn resume_state(&self) -> Result<ResumeState> {
        let get = |name: &str| match self.tensor(name).map(|t| &t.data) {
            Some(Payload::F64(v)) => Ok(v.clone()),
            _ => Err(Error::Checkpoint(format!("checkpoint has no {name}; it cannot be resumed"))),
        };
        Ok(ResumeState {
            params: get("resume/params")?,
            adam: AdamState { m: get("resume/adam_m")?, v: get("resume/adam_v")?, t: self.meta.adam_t },
        })
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_u64::<LittleEndian>(meta.len() as u64)?;
        w.write_all(&meta)?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for t in &self.tensors {
            w.write_u32::<LittleEndian>(t.name.len() as u32)?;
            w.write_all(t.name.as_bytes())?;
            w.write_u8(match t.data {
                Payload::F32(_) => 0,
                Payload::F64(_) => 1,
            })?;
            w.write_u32::<LittleEndian>(t.shape.len() as u32)?;
            for &d in &t.shape {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            match &t.data {
                Payload::F32(v) => v.iter().try_for_each(|&x| w.write_f32::<LittleEndian>(x))?,
                Payload::F64(v) => v.iter().try_for_each(|&x| w.write_f64::<LittleEndian>(x))?,
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let corrupt = |what: &str| Error::Checkpoint(what.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
        if &magic != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.read_u64::<LittleEndian>()? as usize;
        if meta_len > 1 << 26 {
            return Err(corrupt("metadata block too large"));
        }
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta)?;
        let count = r.read_u32::<LittleEndian>()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not utf-8"))?;
            let dtype = r.read_u8()?;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            let shape = (0..ndim)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n > 1 << 30 {
                return Err(corrupt("tensor too large"));
            }
            let data = match dtype {
                0 => {
                    let mut v = vec![0f32; n];
                    r.read_f32_into::<LittleEndian>(&mut v)?;
                    Payload::F32(v)
                }
                1 => {
                    let mut v = vec![0f64; n];
                    r.read_f64_into::<LittleEndian>(&mut v)?;
                    Payload::F64(v)
                }
                d => return Err(Error::Checkpoint(format!("unknown dtype {d} for {name}"))),
            };
            tensors.push(Tensor { name, shape, data });
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        self.write(BufWriter::new(File::create(&tmp)?))?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::read(BufReader::new(f)).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            Error::Io(io) => Error::Checkpoint(format!("{}: {io}", path.display())),
            other => other,
        })
    }
}

pub fn meta_for(model: &PoseModel) -> CheckpointMeta {
    CheckpointMeta {
        arch: model.net.arch().clone(),
        arch_fingerprint: model.net.layout().fingerprint(),
        train_config: None,
        epoch: 0,
        step: 0,
        adam_t: 0,
        rng: None,
        val_epe_mm: None,
        clip_checksum: None,
    }
}
