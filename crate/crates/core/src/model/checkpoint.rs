//! Binary checkpoint format.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "CSGCKPT\0"
//! 8       4     format version, u32 little-endian
//! 12      8     header length H, u64 little-endian
//! 20      H     UTF-8 JSON header (CheckpointHeader)
//! 20+H    ...   every parameter array in header order, f64 little-endian,
//!               row-major
//! ```
//!
//! Values are stored bit-exactly, so a save/load round trip reproduces the
//! parameters exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Group, Params};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CSGCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub arch: serde_json::Value,
    pub sigma_x: Option<f64>,
    pub test_prior: bool,
    pub params: Vec<ParamMeta>,
}

impl CheckpointHeader {
    pub fn new(
        kind: &str,
        arch: serde_json::Value,
        sigma_x: Option<f64>,
        test_prior: bool,
        params: &Params,
    ) -> Self {
        CheckpointHeader {
            kind: kind.to_string(),
            arch,
            sigma_x,
            test_prior,
            params: params
                .entries()
                .iter()
                .map(|p| ParamMeta {
                    name: p.name.clone(),
                    group: p.group,
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "checkpoint holds a `{}` model, expected `{kind}`",
                self.kind
            )));
        }
        Ok(())
    }
}

pub fn encode(header: &CheckpointHeader, params: &Params) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(20 + json.len() + params.count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params.entries() {
        for x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, Params)> {
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 20 {
        return Err(truncated(20));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format(format!("{path:?} is not a checkpoint")));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let start = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| truncated(20 + hlen))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..start])?;
    let total: usize = header.params.iter().map(|m| m.shape.iter().product::<usize>()).sum();
    let expected = start + total * 8;
    if bytes.len() != expected {
        return Err(truncated(expected));
    }
    let mut params = Params::new();
    let mut chunks = bytes[start..].chunks_exact(8);
    for m in &header.params {
        let n = m.shape.iter().product();
        let data = chunks
            .by_ref()
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.add(m.name.clone(), m.group, Tensor::new(m.shape.clone(), data)?);
    }
    Ok((header, params))
}

pub fn write_checkpoint(path: &Path, header: &CheckpointHeader, params: &Params) -> Result<()> {
    fs::write(path, encode(header, params)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Params)> {
    let bytes = fs::read(path)?;
    decode(&bytes, path)
}
