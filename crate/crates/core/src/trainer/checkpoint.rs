//! Versioned binary container for named tensors and string metadata.
//!
//! # Layout
//!
//! ```text
//! DUALENC-CKPT 1\n
//! u64 LE  metadata entry count
//!         each: u32 LE key length | key | u64 LE value length | value
//! u64 LE  tensor count
//!         each: u32 LE name length | name | u32 LE rank | rank × u64 LE dims
//!               | row-major f64 LE payload
//! ```
//!
//! Metadata is written in key order, tensors in insertion order, so equal
//! checkpoints serialize to equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::index::Cursor;
use crate::numcore::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &str = "DUALENC-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const PARAM_PREFIX: &str = "param/";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensor(name).ok_or_else(|| Error::MissingTensor(name.to_owned()))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks metadata `{key}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n").into_bytes();
        out.extend_from_slice(&(self.metadata.len() as u64).to_le_bytes());
        for (k, v) in &self.metadata {
            out.extend_from_slice(&(k.len() as u32).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&(v.len() as u64).to_le_bytes());
            out.extend_from_slice(v.as_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Truncated("checkpoint header".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::invalid("not a checkpoint file"))?;
        let version = header
            .strip_prefix(CHECKPOINT_MAGIC)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| Error::invalid("not a checkpoint file"))?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION.to_string(),
                found: version.to_owned(),
            });
        }
        let mut cur = Cursor { bytes, pos: nl + 1 };
        let utf8 = |b: &[u8]| {
            std::str::from_utf8(b)
                .map(str::to_owned)
                .map_err(|_| Error::invalid("checkpoint string is not UTF-8"))
        };
        let mut metadata = BTreeMap::new();
        let n_meta = u64::from_le_bytes(cur.take()?);
        for _ in 0..n_meta {
            let kl = u32::from_le_bytes(cur.take()?) as usize;
            let key = utf8(cur.slice(kl)?)?;
            let vl = u64::from_le_bytes(cur.take()?) as usize;
            let value = utf8(cur.slice(vl)?)?;
            metadata.insert(key, value);
        }
        let n_tensors = u64::from_le_bytes(cur.take()?);
        let mut tensors = Vec::new();
        for _ in 0..n_tensors {
            let nl = u32::from_le_bytes(cur.take()?) as usize;
            let name = utf8(cur.slice(nl)?)?;
            let rank = u32::from_le_bytes(cur.take()?) as usize;
            let shape = (0..rank)
                .map(|_| Ok(u64::from_le_bytes(cur.take()?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::invalid(format!("tensor `{name}` is too large")))?;
            let payload = cur.slice(len.checked_mul(8).ok_or_else(|| Error::Truncated(name.clone()))?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::invalid(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if cur.pos != bytes.len() {
            return Err(Error::invalid("trailing bytes after the last checkpoint tensor"));
        }
        Ok(Checkpoint { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::index::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Appends every parameter of `store` under `param/<name>`.
    pub fn push_params(&mut self, store: &ParamStore) {
        for id in store.ids() {
            self.tensors
                .push((format!("{PARAM_PREFIX}{}", store.name(id)), store.get(id).clone()));
        }
    }

    /// Copies saved parameter values into `store`. Every parameter must be
    /// present with the shape the current configuration expects.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{PARAM_PREFIX}{}", store.name(id));
            let saved = self.require(&name)?;
            if saved.shape() != store.get(id).shape() {
                return Err(Error::TensorShape {
                    name,
                    expected: store.get(id).shape().to_vec(),
                    actual: saved.shape().to_vec(),
                });
            }
            store.set(id, saved.clone())?;
        }
        Ok(())
    }
}

/// Exact text form of an `f64` (its bit pattern in hex).
pub fn f64_to_meta(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

pub fn f64_from_meta(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::invalid(format!("bad float bits `{s}` in checkpoint")))
}
