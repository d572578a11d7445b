//! IDX files: big-endian header, unsigned-byte payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

#[derive(Clone, Debug, PartialEq)]
pub enum Idx {
    /// `count × (rows·cols)` pixels scaled to `[0, 1]`.
    Images { rows: usize, cols: usize, pixels: Tensor },
    Labels(Vec<usize>),
}

impl Idx {
    pub fn into_images(self) -> Result<Tensor> {
        match self {
            Idx::Images { pixels, .. } => Ok(pixels),
            Idx::Labels(_) => Err(Error::Format("expected an IDX image file, found labels".into())),
        }
    }

    pub fn into_labels(self) -> Result<Vec<usize>> {
        match self {
            Idx::Labels(l) => Ok(l),
            Idx::Images { .. } => Err(Error::Format("expected an IDX label file, found images".into())),
        }
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn load_idx(path: &Path) -> Result<Idx> {
    parse_idx(&std::fs::read(path)?, path)
}

pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<Idx> {
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 8 {
        return Err(truncated(8));
    }
    let magic = be_u32(bytes, 0);
    let count = be_u32(bytes, 4) as usize;
    let (header, item, dims) = match magic {
        IMAGE_MAGIC => {
            if bytes.len() < 16 {
                return Err(truncated(16));
            }
            let (r, c) = (be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
            (16, r * c, Some((r, c)))
        }
        LABEL_MAGIC => (8, 1, None),
        found => {
            return Err(Error::WrongMagic {
                path: path.to_path_buf(),
                found,
            })
        }
    };
    let expected = header + count * item;
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() > expected {
        return Err(Error::CountMismatch {
            what: "IDX header count vs payload items",
            left: count,
            right: (bytes.len() - header) / item.max(1),
        });
    }
    let payload = &bytes[header..];
    Ok(match dims {
        Some((rows, cols)) => Idx::Images {
            rows,
            cols,
            pixels: Tensor::matrix(count, item, payload.iter().map(|&b| f64::from(b) / 255.0).collect())?,
        },
        None => Idx::Labels(payload.iter().map(|&b| usize::from(b)).collect()),
    })
}
