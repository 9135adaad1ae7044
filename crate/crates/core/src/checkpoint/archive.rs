//! NTA v1: a named-tensor archive.
//!
//! ```text
//! "NTA1" | header_len: u64 LE | header: UTF-8 JSON | payload: f32 LE values
//! ```
//!
//! The header maps each tensor name to
//! `{"dtype":"f32","nbytes":..,"offset":..,"shape":[..]}` with offsets
//! relative to the start of the payload. Writers emit the canonical form:
//! names in lexicographic order, offsets assigned in that order with no
//! gaps, compact JSON with sorted keys. Identical content therefore always
//! produces identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NTA1";
const PREAMBLE: usize = 4 + 8;

pub type NamedTensors = BTreeMap<String, Tensor<f32>>;

#[derive(Debug, Error, PartialEq)]
pub enum ArchiveError {
    #[error("not an NTA v1 archive (magic {0:?})")]
    BadMagic(Vec<u8>),
    #[error("archive truncated: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("malformed archive header: {0}")]
    Header(String),
    #[error("tensor `{name}` has unsupported dtype `{dtype}`")]
    UnknownDtype { name: String, dtype: String },
    #[error("tensor `{name}`: nbytes {found} inconsistent with shape (expected {expected})")]
    Inconsistent { name: String, expected: u64, found: u64 },
    #[error("tensors `{first}` and `{second}` overlap in the payload")]
    Overlap { first: String, second: String },
    #[error("{0} trailing payload bytes not covered by any tensor")]
    TrailingBytes(u64),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor `{0}` is empty")]
    EmptyTensor(String),
    #[error("tensor `{0}` contains non-finite values")]
    NonFinite(String),
}

impl ArchiveError {
    /// Stable machine-readable code for each failure kind.
    pub fn code(&self) -> &'static str {
        match self {
            ArchiveError::BadMagic(_) => "bad-magic",
            ArchiveError::Truncated { .. } => "truncated",
            ArchiveError::Header(_) => "bad-header",
            ArchiveError::UnknownDtype { .. } => "unknown-dtype",
            ArchiveError::Inconsistent { .. } => "inconsistent",
            ArchiveError::Overlap { .. } => "overlap",
            ArchiveError::TrailingBytes(_) => "trailing-bytes",
            ArchiveError::DuplicateName(_) => "duplicate-name",
            ArchiveError::EmptyTensor(_) => "empty-tensor",
            ArchiveError::NonFinite(_) => "non-finite",
        }
    }
}

// Field order is alphabetical so serialized keys come out sorted.
#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    dtype: String,
    nbytes: u64,
    offset: u64,
    shape: Vec<u64>,
}

/// Serializes tensors in canonical form.
pub fn write_archive<'a, I>(tensors: I) -> Result<Vec<u8>, ArchiveError>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
{
    let mut sorted: BTreeMap<&str, &Tensor<f32>> = BTreeMap::new();
    for (name, t) in tensors {
        if t.numel() == 0 {
            return Err(ArchiveError::EmptyTensor(name.to_string()));
        }
        if !t.all_finite() {
            return Err(ArchiveError::NonFinite(name.to_string()));
        }
        if sorted.insert(name, t).is_some() {
            return Err(ArchiveError::DuplicateName(name.to_string()));
        }
    }
    let mut header = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in &sorted {
        let nbytes = 4 * t.numel() as u64;
        header.insert(
            *name,
            Entry {
                dtype: "f32".into(),
                nbytes,
                offset,
                shape: t.shape().iter().map(|&d| d as u64).collect(),
            },
        );
        offset += nbytes;
    }
    let header = serde_json::to_vec(&header).map_err(|e| ArchiveError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in sorted.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses and validates an archive.
pub fn read_archive(bytes: &[u8]) -> Result<NamedTensors, ArchiveError> {
    if bytes.len() < 4 {
        return Err(ArchiveError::Truncated {
            needed: PREAMBLE as u64,
            available: bytes.len() as u64,
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(ArchiveError::BadMagic(bytes[..4].to_vec()));
    }
    if bytes.len() < PREAMBLE {
        return Err(ArchiveError::Truncated {
            needed: PREAMBLE as u64,
            available: bytes.len() as u64,
        });
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    let header_end = (PREAMBLE as u64).checked_add(header_len).ok_or(ArchiveError::Truncated {
        needed: u64::MAX,
        available: bytes.len() as u64,
    })?;
    if header_end > bytes.len() as u64 {
        return Err(ArchiveError::Truncated {
            needed: header_end,
            available: bytes.len() as u64,
        });
    }
    let header: BTreeMap<String, Entry> = serde_json::from_slice(&bytes[PREAMBLE..header_end as usize])
        .map_err(|e| ArchiveError::Header(e.to_string()))?;
    let payload = &bytes[header_end as usize..];

    let mut spans = Vec::with_capacity(header.len());
    for (name, e) in &header {
        if e.dtype != "f32" {
            return Err(ArchiveError::UnknownDtype {
                name: name.clone(),
                dtype: e.dtype.clone(),
            });
        }
        if e.shape.is_empty() || e.shape.contains(&0) {
            return Err(ArchiveError::EmptyTensor(name.clone()));
        }
        let expected = e
            .shape
            .iter()
            .try_fold(4u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| ArchiveError::Header(format!("shape of `{name}` overflows")))?;
        if expected != e.nbytes {
            return Err(ArchiveError::Inconsistent {
                name: name.clone(),
                expected,
                found: e.nbytes,
            });
        }
        let end = e.offset.checked_add(e.nbytes).ok_or(ArchiveError::Truncated {
            needed: u64::MAX,
            available: payload.len() as u64,
        })?;
        if end > payload.len() as u64 {
            return Err(ArchiveError::Truncated {
                needed: header_end + end,
                available: bytes.len() as u64,
            });
        }
        spans.push((e.offset, end, name));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(ArchiveError::Overlap {
                first: w[0].2.clone(),
                second: w[1].2.clone(),
            });
        }
    }
    let covered = spans.last().map_or(0, |s| s.1);
    if covered < payload.len() as u64 {
        return Err(ArchiveError::TrailingBytes(payload.len() as u64 - covered));
    }

    let mut out = BTreeMap::new();
    for (name, e) in header {
        let raw = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let shape: Vec<usize> = e.shape.iter().map(|&d| d as usize).collect();
        let t = Tensor::new(&shape, data).map_err(|err| ArchiveError::Header(err.to_string()))?;
        out.insert(name, t);
    }
    Ok(out)
}

pub fn save_archive(path: impl AsRef<Path>, tensors: &NamedTensors) -> crate::Result<()> {
    let bytes = write_archive(tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_archive(path: impl AsRef<Path>) -> crate::Result<NamedTensors> {
    let bytes = std::fs::read(path)?;
    Ok(read_archive(&bytes)?)
}
