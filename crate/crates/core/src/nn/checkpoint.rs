//! Binary model checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic    8 bytes   "TTACKPT1"
//! hlen     u64 LE    length of the JSON header in bytes
//! header   hlen bytes JSON: {"architecture": {...}, "tensors": [{"name", "shape"}, ...]}
//! payload  f64 LE values of every tensor, concatenated in header order
//! ```
//!
//! Tensor names follow `block{l}.conv.weight`, `block{l}.norm.{gamma,beta,
//! running_mean,running_var}`, `head.weight`, `head.bias`.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Architecture, SplitModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TTACKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn to_bytes(model: &SplitModel) -> Vec<u8> {
    let named = model.named_tensors();
    let header = Header {
        architecture: model.arch.clone(),
        tensors: named
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * named.iter().map(|t| t.2.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, values) in named {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint. When `expected` is given the stored architecture
/// must equal it.
pub fn from_bytes(bytes: &[u8], expected: Option<&Architecture>) -> Result<SplitModel> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a model checkpoint".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    if let Some(arch) = expected {
        if *arch != header.architecture {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint has {:?}, configured {:?}",
                header.architecture, arch
            )));
        }
    }
    header.architecture.validate()?;

    let mut payload = &body[hlen..];
    let mut stored: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    for entry in &header.tensors {
        let count: usize = entry.shape.iter().product();
        if payload.len() < count * 8 {
            return Err(Error::Checkpoint(format!("truncated payload in `{}`", entry.name)));
        }
        let values = payload[..count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        payload = &payload[count * 8..];
        stored.insert(entry.name.clone(), (entry.shape.clone(), values));
    }
    if !payload.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after payload", payload.len())));
    }

    // Build a skeleton with the right shapes, then fill every tensor.
    let mut model = SplitModel::new(header.architecture.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let shapes: HashMap<String, Vec<usize>> = model
        .named_tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    for (name, slot) in model.named_tensors_mut() {
        let (shape, values) = stored.remove(&name).ok_or_else(|| Error::MissingLayer(name.clone()))?;
        if shape != shapes[&name] {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {shape:?}, expected {:?}",
                shapes[&name]
            )));
        }
        *slot = values;
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    Ok(model)
}

pub fn save(model: &SplitModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, expected: Option<&Architecture>) -> Result<SplitModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, expected)
}
