//! Binary tensor container shared by model checkpoints and dataset files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SYNCCKPT"  version:u32
//! repeated until end of file:
//!     name_len:u32  name:utf-8[name_len]  rank:u32  dims:u32[rank]  payload:f32[prod(dims)]
//! ```
//!
//! Entries are written in lexicographic name order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SYNCCKPT";
pub const VERSION: u32 = 1;

/// Named tensors, stored at 32-bit precision.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries.get(name).ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copies every entry of `other` in, replacing duplicates.
    pub fn merge(&mut self, other: Checkpoint) {
        self.entries.extend(other.entries);
    }

    /// Entries whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Checkpoint {
        Checkpoint {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for (name, t) in &self.entries {
            let len = u32::try_from(name.len()).map_err(|_| Error::Format("name too long".into()))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Format("dimension too large".into()))?;
                w.write_all(&d.to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut entries = BTreeMap::new();
        while r.pos < bytes.len() {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("payload too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
            if entries.insert(name.clone(), Tensor::new(dims, data)?).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name:?}")));
            }
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
