//! Parameter checkpoints: `<prefix>.bin` holds little-endian `f64` data in
//! name order, `<prefix>.json` indexes it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tape::ParamStore;
use super::tensor::{Shape, Tensor};

pub const FORMAT: &str = "d4-params-v1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint index: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint format {0:?} is not {FORMAT}")]
    Format(String),
    #[error("checkpoint entry {name} is corrupt: {reason}")]
    Corrupt { name: String, reason: String },
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Index {
    format: String,
    entries: Vec<Entry>,
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn save(prefix: &Path, params: &ParamStore) -> Result<(), CheckpointError> {
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, t) in params {
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        entries.push(Entry { name: name.clone(), shape: t.shape().dims(), offset, len: t.len() });
        offset += t.len();
    }
    fs::write(with_ext(prefix, "bin"), bytes)?;
    let index = Index { format: FORMAT.into(), entries };
    fs::write(with_ext(prefix, "json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn load(prefix: &Path) -> Result<ParamStore, CheckpointError> {
    let index: Index = serde_json::from_str(&fs::read_to_string(with_ext(prefix, "json"))?)?;
    if index.format != FORMAT {
        return Err(CheckpointError::Format(index.format));
    }
    let bytes = fs::read(with_ext(prefix, "bin"))?;
    let mut out = ParamStore::new();
    for e in index.entries {
        let corrupt = |reason: &str| CheckpointError::Corrupt { name: e.name.clone(), reason: reason.into() };
        let shape = Shape::from_dims(&e.shape).ok_or_else(|| corrupt("rank above 2"))?;
        if shape.len() != e.len {
            return Err(corrupt("length does not match shape"));
        }
        let start = e.offset * 8;
        let end = start + e.len * 8;
        let chunk = bytes.get(start..end).ok_or_else(|| corrupt("data out of range"))?;
        let data = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        out.insert(e.name.clone(), Tensor::new(shape, data));
    }
    Ok(out)
}
