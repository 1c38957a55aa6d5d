//! MNIST-style IDX files with unsigned-byte payloads.

use std::fs;
use std::path::Path;

use sharedadv_core::data::{Dataset, Domain, Split};
use sharedadv_core::Tensor;

use crate::error::{Error, Result};

const LABELS: u32 = 0x0000_0801;
const IMAGES: u32 = 0x0000_0803;

/// Parse an IDX buffer. Label files give a vector, image files an
/// `[n, rows, cols]` cube; bytes map to floats in `[0, 255]`.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.to_owned(),
            expected: 4,
            found: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    let rank = match magic {
        LABELS => 1,
        IMAGES => 3,
        _ => {
            return Err(Error::BadMagic {
                path: path.to_owned(),
                found: bytes[..4].to_vec(),
            })
        }
    };
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Truncated {
            path: path.to_owned(),
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<u64> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as u64)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?))
        .and_then(|n| n.checked_add(header).map(|_| n))
        .ok_or_else(|| Error::DimensionOverflow {
            path: path.to_owned(),
            dims: dims.clone(),
        })?;
    let payload = &bytes[header..];
    if payload.len() < count {
        return Err(Error::Truncated {
            path: path.to_owned(),
            expected: header + count,
            found: bytes.len(),
        });
    }
    if payload.len() > count {
        return Err(Error::TrailingBytes {
            path: path.to_owned(),
            found: payload.len() - count,
        });
    }
    let shape = dims.iter().map(|&d| d as usize).collect();
    Ok(Tensor::new(shape, payload.iter().map(|&b| b as f32).collect())?)
}

pub fn load_idx(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    parse_idx(&bytes, path)
}

/// Pair an image cube with its label vector as a `[n, rows, cols, 1]`
/// dataset in the byte domain.
pub fn load_idx_dataset(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let x = load_idx(images)?;
    let y = load_idx(labels)?;
    if x.rank() != 3 || y.rank() != 1 {
        return Err(Error::Format {
            path: images.to_owned(),
            msg: "expected an image cube and a label vector".into(),
        });
    }
    let ys: Vec<usize> = y.as_slice().iter().map(|&v| v as usize).collect();
    if let Some(&bad) = ys.iter().find(|&&l| l >= classes) {
        return Err(Error::Format {
            path: labels.to_owned(),
            msg: format!("label {bad} outside {classes} classes"),
        });
    }
    if ys.len() != x.shape()[0] {
        return Err(Error::Format {
            path: labels.to_owned(),
            msg: format!("{} labels for {} images", ys.len(), x.shape()[0]),
        });
    }
    let shape = x.shape().to_vec();
    let x = x.reshape(&[shape[0], shape[1], shape[2], 1])?;
    Ok(Dataset::new(x, ys, Vec::new(), classes, Domain::BYTE, Split::Train)?)
}
