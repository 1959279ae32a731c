//! Named-parameter archive.
//!
//! Layout, all integers `u64` little-endian:
//!
//! ```text
//! version | entry_count
//! entry_count x { name_len | name (UTF-8) | rank | dims[rank] | payload (f64 LE)[prod(dims)] }
//! ```
//!
//! Entries are written in lexicographic name order, so equal contents give
//! equal bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u64 = 1;

/// Entry that carries the owning config's 64-bit hash as four 16-bit limbs.
pub const META_CONFIG_HASH: &str = "meta.config_hash";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, Tensor<f64>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_store<T: Scalar>(store: &ParamStore<T>) -> Self {
        let mut ck = Checkpoint::new();
        ck.merge_store(store);
        ck
    }

    pub fn merge_store<T: Scalar>(&mut self, store: &ParamStore<T>) {
        for (name, t) in store.iter() {
            let vals = t.values().iter().map(|v| v.to_f64_lossy()).collect();
            self.entries.insert(name.to_string(), Tensor::new(t.shape(), vals).expect("shape"));
        }
    }

    /// Entries under `prefix` (all entries for `""`) as a parameter store,
    /// skipping metadata.
    pub fn to_store<T: Scalar>(&self, prefix: &str) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for (name, t) in &self.entries {
            if name.starts_with("meta.") || !name.starts_with(prefix) {
                continue;
            }
            let vals = t.values().iter().map(|&v| T::lit(v)).collect();
            store.insert(name.clone(), Tensor::new(t.shape(), vals).expect("shape"));
        }
        store
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f64>) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.entries.get(name)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.entries.keys().any(|k| k.starts_with(prefix))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn set_config_hash(&mut self, hash: u64) {
        let limbs: Vec<f64> = (0..4).map(|i| ((hash >> (16 * i)) & 0xFFFF) as f64).collect();
        self.insert(META_CONFIG_HASH, Tensor::new(&[4], limbs).expect("shape"));
    }

    pub fn config_hash(&self) -> Option<u64> {
        let t = self.get(META_CONFIG_HASH)?;
        if t.len() != 4 {
            return None;
        }
        Some(t.values().iter().enumerate().fold(0u64, |acc, (i, &v)| acc | ((v as u64) << (16 * i))))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let version = read_u64(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let count = read_u64(r)?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let name_len = read_len(r, 1 << 16)?;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let rank = read_len(r, 8)?;
            let dims: Vec<usize> = (0..rank).map(|_| read_len(r, 1 << 32)).collect::<Result<_>>()?;
            let n: usize = dims.iter().product();
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            let vals = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if ck.entries.contains_key(&name) {
                return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
            }
            ck.entries.insert(name, Tensor::new(&dims, vals)?);
        }
        Ok(ck)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("in-memory write");
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let ck = Self::read_from(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len())));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn read_len<R: Read>(r: &mut R, max: u64) -> Result<usize> {
    let v = read_u64(r)?;
    if v > max {
        return Err(Error::Checkpoint(format!("length field {v} exceeds {max}")));
    }
    Ok(v as usize)
}
