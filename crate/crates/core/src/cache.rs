//! Binary feature cache: sample id -> 512 little-endian `f32` values.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"CLFC"
//! version u32 (= 1)
//! dim     u32
//! count   u64
//! count x { id_len u32, id utf-8 bytes, dim x f32 }
//! ```
//!
//! Records are written in ascending id order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::types::CLIP_DIM;

const MAGIC: &[u8; 4] = b"CLFC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureCache {
    entries: BTreeMap<String, Vec<f32>>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, values: Vec<f32>) -> Result<()> {
        if values.len() != CLIP_DIM {
            return Err(Error::Cache(format!("feature has {} values, expected {CLIP_DIM}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Cache("non-finite feature value".into()));
        }
        self.entries.insert(id.into(), values);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(CLIP_DIM as u32)?;
        w.write_u64::<LittleEndian>(self.entries.len() as u64)?;
        for (id, values) in &self.entries {
            w.write_u32::<LittleEndian>(id.len() as u32)?;
            w.write_all(id.as_bytes())?;
            for &v in values {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Cache("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Cache(format!("unsupported version {version}")));
        }
        let dim = r.read_u32::<LittleEndian>()? as usize;
        if dim != CLIP_DIM {
            return Err(Error::Cache(format!("dimension {dim}, expected {CLIP_DIM}")));
        }
        let count = r.read_u64::<LittleEndian>()?;
        let mut cache = Self::new();
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut id = vec![0u8; len];
            r.read_exact(&mut id)?;
            let id = String::from_utf8(id).map_err(|_| Error::Cache("id is not utf-8".into()))?;
            let mut values = vec![0f32; dim];
            r.read_f32_into::<LittleEndian>(&mut values)?;
            cache.insert(id, values)?;
        }
        Ok(cache)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}
