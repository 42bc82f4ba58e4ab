//! Offline video index: precomputed hybrid-space embeddings, scanned exactly
//! at query time.
//!
//! # File layout
//!
//! ```text
//! DUALENC-INDEX 1 <dim_lat> <dim_con>\n
//! alpha <default fusion weight>\n
//! records <n>\n
//! n × { u32 LE id length | id bytes (UTF-8) | dim_lat × f32 LE | dim_con × f32 LE }
//! ```

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hybridspace::{check_alpha, HybridEmbedding};

pub const INDEX_MAGIC: &str = "DUALENC-INDEX";
pub const INDEX_VERSION: u32 = 1;

/// Candidates per parallel scoring shard.
const SHARD: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    dim_lat: usize,
    dim_con: usize,
    alpha: f64,
    ids: Vec<String>,
    id_set: HashSet<String>,
    latent: Vec<f32>,
    concept: Vec<f32>,
    latent_norms: Vec<f64>,
}

impl EmbeddingIndex {
    pub fn new(dim_lat: usize, dim_con: usize, alpha: f64) -> Result<Self> {
        if dim_lat == 0 || dim_con == 0 {
            return Err(Error::invalid("index dimensions must be positive"));
        }
        check_alpha(alpha)?;
        Ok(EmbeddingIndex {
            dim_lat,
            dim_con,
            alpha,
            ids: Vec::new(),
            id_set: HashSet::new(),
            latent: Vec::new(),
            concept: Vec::new(),
            latent_norms: Vec::new(),
        })
    }

    pub fn with_capacity(dim_lat: usize, dim_con: usize, alpha: f64, n: usize) -> Result<Self> {
        let mut idx = Self::new(dim_lat, dim_con, alpha)?;
        idx.ids.reserve(n);
        idx.latent.reserve(n * dim_lat);
        idx.concept.reserve(n * dim_con);
        idx.latent_norms.reserve(n);
        Ok(idx)
    }

    pub fn dim_lat(&self) -> usize {
        self.dim_lat
    }

    pub fn dim_con(&self) -> usize {
        self.dim_con
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn contains(&self, id: &str) -> bool {
        self.id_set.contains(id)
    }

    pub fn latent(&self, i: usize) -> &[f32] {
        &self.latent[i * self.dim_lat..(i + 1) * self.dim_lat]
    }

    pub fn concept(&self, i: usize) -> &[f32] {
        &self.concept[i * self.dim_con..(i + 1) * self.dim_con]
    }

    pub fn push(&mut self, id: impl Into<String>, emb: &HybridEmbedding) -> Result<()> {
        let lat: Vec<f32> = emb.latent.iter().map(|&v| v as f32).collect();
        let con: Vec<f32> = emb.concept.iter().map(|&v| v as f32).collect();
        self.push_f32(id.into(), &lat, &con)
    }

    pub fn push_f32(&mut self, id: String, latent: &[f32], concept: &[f32]) -> Result<()> {
        if latent.len() != self.dim_lat || concept.len() != self.dim_con {
            return Err(Error::shape(
                "index record",
                &[latent.len(), concept.len()],
                &[self.dim_lat, self.dim_con],
            ));
        }
        if concept.iter().any(|&v| !(v >= 0.0)) || latent.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("record `{id}` has invalid values")));
        }
        if !self.id_set.insert(id.clone()) {
            return Err(Error::invalid(format!("duplicate index id `{id}`")));
        }
        self.latent_norms
            .push(latent.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt());
        self.ids.push(id);
        self.latent.extend_from_slice(latent);
        self.concept.extend_from_slice(concept);
        Ok(())
    }

    /// Raw cosine and generalized-Jaccard similarities of `query` to every
    /// record, in record order.
    pub fn raw_scores(&self, query: &HybridEmbedding) -> Result<(Vec<f64>, Vec<f64>)> {
        if query.latent.len() != self.dim_lat || query.concept.len() != self.dim_con {
            return Err(Error::shape(
                "query embedding",
                &[query.latent.len(), query.concept.len()],
                &[self.dim_lat, self.dim_con],
            ));
        }
        let qnorm = query.latent.iter().map(|v| v * v).sum::<f64>().sqrt();
        if qnorm == 0.0 {
            return Err(Error::invalid("cosine similarity of a zero vector is undefined"));
        }
        let q_lat: Vec<f64> = query.latent.iter().map(|v| v / qnorm).collect();
        let q_con = &query.concept;
        let scores: Vec<(f64, f64)> = (0..self.len())
            .into_par_iter()
            .with_min_len(SHARD)
            .map(|i| {
                let dot: f64 = self
                    .latent(i)
                    .iter()
                    .zip(&q_lat)
                    .map(|(&c, &q)| c as f64 * q)
                    .sum();
                let norm = self.latent_norms[i];
                let lat = if norm == 0.0 { 0.0 } else { dot / norm };
                let (mut num, mut den) = (0.0, 0.0);
                for (&c, &q) in self.concept(i).iter().zip(q_con) {
                    let c = c as f64;
                    num += c.min(q);
                    den += c.max(q);
                }
                let con = if den == 0.0 { 0.0 } else { num / den };
                (lat, con)
            })
            .collect();
        Ok(scores.into_iter().unzip())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!(
            "{INDEX_MAGIC} {INDEX_VERSION} {} {}\nalpha {}\nrecords {}\n",
            self.dim_lat,
            self.dim_con,
            self.alpha,
            self.len()
        )
        .into_bytes();
        for i in 0..self.len() {
            let id = self.ids[i].as_bytes();
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id);
            for v in self.latent(i).iter().chain(self.concept(i)) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut line = |what: &str| -> Result<String> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Truncated(format!("index header ({what})")))?;
            let s = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| Error::invalid("index header is not UTF-8"))?
                .to_owned();
            pos += end + 1;
            Ok(s)
        };
        let header = line("magic")?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 4 || fields[0] != INDEX_MAGIC {
            return Err(Error::invalid("not an embedding index file"));
        }
        if fields[1] != INDEX_VERSION.to_string() {
            return Err(Error::VersionMismatch {
                expected: INDEX_VERSION.to_string(),
                found: fields[1].to_owned(),
            });
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::invalid(format!("bad index header field `{s}`")));
        let (dim_lat, dim_con) = (num(fields[2])?, num(fields[3])?);
        let alpha_line = line("alpha")?;
        let alpha = alpha_line
            .strip_prefix("alpha ")
            .and_then(|a| a.parse::<f64>().ok())
            .ok_or_else(|| Error::invalid("bad index alpha line"))?;
        let count_line = line("records")?;
        let count = count_line
            .strip_prefix("records ")
            .map(num)
            .ok_or_else(|| Error::invalid("bad index records line"))??;

        let mut idx = Self::with_capacity(dim_lat, dim_con, alpha, count)?;
        let mut cursor = Cursor { bytes, pos };
        let mut lat = vec![0f32; dim_lat];
        let mut con = vec![0f32; dim_con];
        for _ in 0..count {
            let n = u32::from_le_bytes(cursor.take::<4>()?) as usize;
            let id = std::str::from_utf8(cursor.slice(n)?)
                .map_err(|_| Error::invalid("index id is not UTF-8"))?
                .to_owned();
            for v in lat.iter_mut().chain(con.iter_mut()) {
                *v = f32::from_le_bytes(cursor.take::<4>()?);
            }
            idx.push_f32(id, &lat, &con)?;
        }
        if cursor.pos != bytes.len() {
            return Err(Error::invalid("trailing bytes after the last index record"));
        }
        Ok(idx)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::index::write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`,
/// so an interrupted write never leaves a truncated file behind.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn slice(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(format!("needed {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.slice(N)?.try_into().expect("slice of length N"))
    }
}
