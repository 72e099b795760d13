//! Single-file model container.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"MIXDCKPT" | u32 version | u32 header_len | header JSON
//! u32 array_count
//! per array: u32 name_len | name | u32 ndim | u64 dims[ndim] | f32 data[prod(dims)]
//! ```
//!
//! The JSON header carries the kind, architecture descriptor, seed and any
//! metadata the owner wants to keep.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"MIXDCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub arrays: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Checkpoint { header: serde_json::json!({ "kind": kind }), arrays: BTreeMap::new() }
    }

    pub fn kind(&self) -> Option<&str> {
        self.header.get("kind").and_then(|v| v.as_str())
    }

    pub fn set<V: Serialize>(&mut self, key: &str, value: &V) -> Result<()> {
        let v = serde_json::to_value(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
        self.header
            .as_object_mut()
            .ok_or_else(|| Error::Checkpoint("header is not an object".into()))?
            .insert(key.into(), v);
        Ok(())
    }

    pub fn get<V: DeserializeOwned>(&self, key: &str) -> Result<V> {
        let v = self.header.get(key).ok_or_else(|| Error::Checkpoint(format!("header field {key} missing")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("header field {key}: {e}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {other:?}"))),
        }
    }

    /// Stores every entry of `store` under `prefix`.
    pub fn put_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (name, t) in store.named() {
            self.arrays.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Loads every entry of `store` from arrays named `prefix + name`.
    pub fn take_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let values: BTreeMap<String, Tensor<f32>> = self
            .arrays
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
            .collect();
        store.load_named(values).map_err(Error::Checkpoint)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("JSON value serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a mixdefense checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: serde_json::Value =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = r.u32()?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            arrays.insert(name, Tensor::new(shape, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
