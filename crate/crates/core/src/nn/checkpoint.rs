//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `IPDCKPT1`, u32 version, u64 config length,
//! config JSON bytes, 32-byte SHA-256 of the config, u32 tensor count, then
//! per tensor: u32 name length, name, u32 rows, u32 cols, rows*cols f64.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::matrix::Matrix;
use super::tape::ParamStore;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"IPDCKPT1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub config_hash: String,
    pub tensors: Vec<(String, Matrix)>,
}

pub fn config_hash(config: &serde_json::Value) -> String {
    hex(&Sha256::digest(config.to_string().as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(config: serde_json::Value, stores: &[(&str, &ParamStore)]) -> Self {
        let mut tensors = Vec::new();
        for (prefix, store) in stores {
            for (name, value) in store.names().iter().zip(store.values()) {
                tensors.push((format!("{prefix}/{name}"), value.clone()));
            }
        }
        Checkpoint {
            config_hash: config_hash(&config),
            config,
            tensors,
        }
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.tensors.iter().any(|(n, _)| n.starts_with(&p))
    }

    /// Loads every tensor under `prefix/` into `store`.
    pub fn restore(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let p = format!("{prefix}/");
        let (names, values): (Vec<String>, Vec<Matrix>) = self
            .tensors
            .iter()
            .filter_map(|(n, m)| n.strip_prefix(&p).map(|s| (s.to_string(), m.clone())))
            .unzip();
        store
            .load(&names, values)
            .map_err(|e| Error::Checkpoint(format!("{prefix}: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.config.to_string().into_bytes();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&Sha256::digest(&cfg));
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols as u32).to_le_bytes());
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u64()? as usize;
        let cfg = r.take(len)?;
        let hash = r.take(32)?;
        if Sha256::digest(cfg).as_slice() != hash {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let config: serde_json::Value = serde_json::from_slice(cfg)
            .map_err(|e| Error::Checkpoint(format!("config json: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nl = r.u32()? as usize;
            let name = String::from_utf8(r.take(nl)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Matrix::from_vec(rows, cols, data)));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config_hash: hex(hash),
            config,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
