//! IDX binary format: `00 00 <type> <ndims>`, big-endian `u32` dimension
//! sizes, then the big-endian payload.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad magic at byte {offset}: expected 00 00, found {found:02x?}")]
    BadMagic { offset: usize, found: [u8; 2] },
    #[error("unsupported element type 0x{byte:02x} at byte {offset}")]
    UnsupportedType { offset: usize, byte: u8 },
    #[error("truncated at byte {offset}: needed {needed} more bytes, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("{extra} trailing bytes after payload ending at byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("zero-sized dimension {index} at byte {offset}")]
    EmptyDimension { offset: usize, index: usize },
    #[error("labels at byte {offset}: element type must be unsigned byte")]
    LabelType { offset: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdxType {
    U8,
    I8,
    I16,
    I32,
    F32,
    F64,
}

impl IdxType {
    fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0x08 => IdxType::U8,
            0x09 => IdxType::I8,
            0x0B => IdxType::I16,
            0x0C => IdxType::I32,
            0x0D => IdxType::F32,
            0x0E => IdxType::F64,
            _ => return None,
        })
    }

    fn byte(self) -> u8 {
        match self {
            IdxType::U8 => 0x08,
            IdxType::I8 => 0x09,
            IdxType::I16 => 0x0B,
            IdxType::I32 => 0x0C,
            IdxType::F32 => 0x0D,
            IdxType::F64 => 0x0E,
        }
    }

    fn width(self) -> usize {
        match self {
            IdxType::U8 | IdxType::I8 => 1,
            IdxType::I16 => 2,
            IdxType::I32 | IdxType::F32 => 4,
            IdxType::F64 => 8,
        }
    }
}

struct Header {
    kind: IdxType,
    dims: Vec<usize>,
    payload_at: usize,
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize) -> Result<&'a [u8], IdxError> {
    bytes.get(at..at + n).ok_or(IdxError::Truncated {
        offset: at,
        needed: n,
        available: bytes.len().saturating_sub(at),
    })
}

fn header(bytes: &[u8]) -> Result<Header, IdxError> {
    let magic = take(bytes, 0, 4)?;
    if magic[0] != 0 || magic[1] != 0 {
        return Err(IdxError::BadMagic { offset: 0, found: [magic[0], magic[1]] });
    }
    let kind = IdxType::from_byte(magic[2]).ok_or(IdxError::UnsupportedType { offset: 2, byte: magic[2] })?;
    let ndims = magic[3] as usize;
    let mut dims = Vec::with_capacity(ndims);
    for i in 0..ndims {
        let at = 4 + 4 * i;
        let d = take(bytes, at, 4)?;
        let d = u32::from_be_bytes([d[0], d[1], d[2], d[3]]) as usize;
        if d == 0 {
            return Err(IdxError::EmptyDimension { offset: at, index: i });
        }
        dims.push(d);
    }
    let payload_at = 4 + 4 * ndims;
    let n: usize = dims.iter().product();
    let need = n * kind.width();
    take(bytes, payload_at, need)?;
    let end = payload_at + need;
    if bytes.len() > end {
        return Err(IdxError::TrailingBytes { offset: end, extra: bytes.len() - end });
    }
    Ok(Header { kind, dims, payload_at })
}

fn decode(kind: IdxType, payload: &[u8]) -> Vec<f64> {
    let w = kind.width();
    payload
        .chunks_exact(w)
        .map(|c| match kind {
            IdxType::U8 => c[0] as f64 / 255.0,
            IdxType::I8 => c[0] as i8 as f64,
            IdxType::I16 => i16::from_be_bytes([c[0], c[1]]) as f64,
            IdxType::I32 => i32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64,
            IdxType::F32 => f32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64,
            IdxType::F64 => f64::from_be_bytes(c.try_into().unwrap()),
        })
        .collect()
}

/// Parses an IDX file. Unsigned-byte payloads are rescaled to `[0, 1]`.
pub fn parse_idx(bytes: &[u8]) -> Result<Tensor, IdxError> {
    let h = header(bytes)?;
    let data = decode(h.kind, &bytes[h.payload_at..]);
    Ok(Tensor::new(h.dims, data).expect("header sizes the payload"))
}

/// Parses an unsigned-byte IDX label file into class indices.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, IdxError> {
    let h = header(bytes)?;
    if h.kind != IdxType::U8 {
        return Err(IdxError::LabelType { offset: 2 });
    }
    Ok(bytes[h.payload_at..].iter().map(|&b| b as usize).collect())
}

/// Serializes `t` as IDX. For [`IdxType::U8`] values are multiplied by 255
/// and rounded, inverting the rescale done by [`parse_idx`].
pub fn write_idx(t: &Tensor, kind: IdxType) -> Vec<u8> {
    let mut out = vec![0, 0, kind.byte(), t.shape().len() as u8];
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &x in t.data() {
        match kind {
            IdxType::U8 => out.push((x * 255.0).round().clamp(0.0, 255.0) as u8),
            IdxType::I8 => out.push(x.round() as i8 as u8),
            IdxType::I16 => out.extend_from_slice(&(x.round() as i16).to_be_bytes()),
            IdxType::I32 => out.extend_from_slice(&(x.round() as i32).to_be_bytes()),
            IdxType::F32 => out.extend_from_slice(&(x as f32).to_be_bytes()),
            IdxType::F64 => out.extend_from_slice(&x.to_be_bytes()),
        }
    }
    out
}

pub fn write_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, 1];
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}
