//! Binary checkpoints.
//!
//! Layout: `b"SPNN"`, u32 LE version, u64 LE header length, UTF-8 JSON
//! header, every parameter tensor as LE f64 in manifest order, then every
//! mask as one byte per element.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Model, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPNN";
pub const VERSION: u32 = 1;
const DTYPE: &str = "f64le";

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor {name}: manifest shape {found:?}, model expects {expected:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("{0} trailing bytes after the last mask")]
    TrailingBytes(usize),
    #[error("mask {name} holds {value} at element {index}")]
    MaskNotBinary { name: String, index: usize, value: u8 },
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelSpec,
    seeds: Vec<u64>,
    dtype: String,
    epochs_trained: usize,
    tensors: Vec<Entry>,
    masks: Vec<Entry>,
}

fn manifest(items: Vec<(String, &Tensor)>) -> Vec<Entry> {
    items.into_iter().map(|(name, t)| Entry { name, shape: t.shape().to_vec() }).collect()
}

pub fn encode(model: &Model, seeds: &[u64]) -> Vec<u8> {
    let header = Header {
        model: model.spec.clone(),
        seeds: seeds.to_vec(),
        dtype: DTYPE.into(),
        epochs_trained: model.epochs_trained,
        tensors: manifest(model.named_tensors()),
        masks: manifest(model.named_masks()),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.named_tensors() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for (_, m) in model.named_masks() {
        out.extend(m.data().iter().map(|&v| (v != 0.0) as u8));
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated {
            needed: self.pos.saturating_add(n),
            available: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

/// Decodes a checkpoint into the model and its seed list.
pub fn decode(bytes: &[u8]) -> Result<(Model, Vec<u64>), CheckpointError> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(c.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = u64::from_le_bytes(c.take(8)?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| CheckpointError::Header("header length overflows".into()))?;
    let header: Header =
        serde_json::from_slice(c.take(len)?).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.dtype != DTYPE {
        return Err(CheckpointError::Header(format!("dtype {}", header.dtype)));
    }
    let mut model = Model::new(&header.model).map_err(|e| CheckpointError::Header(e.to_string()))?;
    model.epochs_trained = header.epochs_trained;

    let check = |entries: &[Entry], expected: Vec<(String, &Tensor)>| -> Result<(), CheckpointError> {
        if entries.len() != expected.len() {
            return Err(CheckpointError::Header(format!(
                "manifest lists {} tensors, model has {}",
                entries.len(),
                expected.len()
            )));
        }
        for (e, (name, t)) in entries.iter().zip(expected) {
            if e.name != name || e.shape != t.shape() {
                return Err(CheckpointError::Shape { name: e.name.clone(), expected: t.shape().to_vec(), found: e.shape.clone() });
            }
        }
        Ok(())
    };
    check(&header.tensors, model.named_tensors())?;
    check(&header.masks, model.named_masks())?;

    let read_f64 = |c: &mut Cursor, t: &mut Tensor| -> Result<(), CheckpointError> {
        let raw = c.take(8 * t.len())?;
        for (x, b) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *x = f64::from_le_bytes(b.try_into().unwrap());
        }
        Ok(())
    };
    for p in &mut model.params {
        read_f64(&mut c, &mut p.weight)?;
        read_f64(&mut c, &mut p.bias)?;
        if let (Some(wr), Some(br)) = (&mut p.weight_rho, &mut p.bias_rho) {
            read_f64(&mut c, wr)?;
            read_f64(&mut c, br)?;
        }
    }
    for (i, p) in model.params.iter_mut().enumerate() {
        for (suffix, m) in [("weight_mask", &mut p.weight_mask), ("bias_mask", &mut p.bias_mask)] {
            let raw = c.take(m.len())?;
            for (j, (x, &b)) in m.data_mut().iter_mut().zip(raw).enumerate() {
                if b > 1 {
                    return Err(CheckpointError::MaskNotBinary { name: format!("layer{i}.{suffix}"), index: j, value: b });
                }
                *x = b as f64;
            }
        }
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - c.pos));
    }
    Ok((model, header.seeds))
}

pub fn save(path: &Path, model: &Model, seeds: &[u64]) -> crate::Result<()> {
    std::fs::write(path, encode(model, seeds))?;
    Ok(())
}

pub fn load(path: &Path) -> crate::Result<(Model, Vec<u64>)> {
    Ok(decode(&std::fs::read(path)?)?)
}
