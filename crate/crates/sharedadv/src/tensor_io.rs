//! The `TNSR1` binary tensor format.
//!
//! Layout: the five ASCII bytes `TNSR1`, a little-endian `u32` rank, `rank`
//! little-endian `u32` extents, then the row-major payload as little-endian
//! IEEE-754 `f32`. A scalar is 9 header bytes plus 4 payload bytes.

use std::fs;
use std::path::Path;

use sharedadv_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"TNSR1";

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_owned(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 9 {
        if !MAGIC.starts_with(&bytes[..bytes.len().min(5)]) {
            return Err(Error::BadMagic {
                path: path.to_owned(),
                found: bytes[..bytes.len().min(5)].to_vec(),
            });
        }
        return Err(truncated(9));
    }
    if &bytes[..5] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_owned(),
            found: bytes[..5].to_vec(),
        });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let rank = word(5) as usize;
    let header = rank
        .checked_mul(4)
        .and_then(|r| r.checked_add(9))
        .ok_or_else(|| Error::DimensionOverflow {
            path: path.to_owned(),
            dims: vec![rank as u64],
        })?;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let shape: Vec<usize> = (0..rank).map(|i| word(9 + 4 * i) as usize).collect();
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::DimensionOverflow {
            path: path.to_owned(),
            dims: shape.iter().map(|&d| d as u64).collect(),
        })?;
    let total = header + count;
    if bytes.len() < total {
        return Err(truncated(total));
    }
    if bytes.len() > total {
        return Err(Error::TrailingBytes {
            path: path.to_owned(),
            found: bytes.len() - total,
        });
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(Error::io(path))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_tensor(&bytes, path)
}
