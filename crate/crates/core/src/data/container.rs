//! Flat binary container for generated datasets.
//!
//! ```text
//! offset  size  content (little-endian)
//! 0       8     magic "CSGDATA\0"
//! 8       4     version u32
//! 12      8     item count N, u64
//! 20      8     observation width D, u64
//! 28      4     classes u32
//! 32      4     d_S u32 (0 without latents)
//! 36      4     d_V u32
//! 40      1     latents flag (0 or 1)
//! 41      4     domain tag length T, u32
//! 45      T     domain tag, UTF-8
//! ...     4·N·D observations, f32
//! ...     N     labels, u8
//! ...     8·N·(d_S+d_V)  latents (s then v per item), f64, when flagged
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Dataset, Latents};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATA_MAGIC: &[u8; 8] = b"CSGDATA\0";
pub const DATA_VERSION: u32 = 1;

pub fn digest_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode(set: &Dataset) -> Result<Vec<u8>> {
    set.validate()?;
    if set.classes > 256 {
        return Err(Error::Format(format!("{} classes do not fit u8 labels", set.classes)));
    }
    let (n, d) = (set.len(), set.dim());
    let (ds, dv) = set.latents.as_ref().map_or((0, 0), |l| (l.s.cols(), l.v.cols()));
    let mut out = Vec::with_capacity(45 + set.domain.len() + n * (4 * d + 1 + 8 * (ds + dv)));
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    out.extend_from_slice(&(set.classes as u32).to_le_bytes());
    out.extend_from_slice(&(ds as u32).to_le_bytes());
    out.extend_from_slice(&(dv as u32).to_le_bytes());
    out.push(u8::from(set.latents.is_some()));
    out.extend_from_slice(&(set.domain.len() as u32).to_le_bytes());
    out.extend_from_slice(set.domain.as_bytes());
    for &x in set.x.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out.extend(set.labels.iter().map(|&y| y as u8));
    if let Some(l) = &set.latents {
        for i in 0..n {
            for &z in l.s.row(i).iter().chain(l.v.row(i)) {
                out.extend_from_slice(&z.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Truncated {
            path: self.path.to_path_buf(),
            expected: self.at.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let mut r = Reader { bytes, at: 0, path };
    if r.take(8)? != DATA_MAGIC {
        return Err(Error::Format(format!("{path:?} is not a dataset container")));
    }
    let version = r.u32()?;
    if version != DATA_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let (n, d) = (r.u64()?, r.u64()?);
    let classes = r.u32()? as usize;
    let (ds, dv) = (r.u32()? as usize, r.u32()? as usize);
    let has_latents = r.take(1)?[0] == 1;
    let tag_len = r.u32()? as usize;
    let domain = String::from_utf8(r.take(tag_len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
    let x: Vec<f64> = r
        .take(n.saturating_mul(d).saturating_mul(4))?
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let labels = r.take(n)?.iter().map(|&b| usize::from(b)).collect();
    let latents = if has_latents {
        let z: Vec<f64> = r
            .take(n.saturating_mul(ds + dv).saturating_mul(8))?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let block = |lo: usize, w: usize| {
            Tensor::matrix(n, w, (0..n).flat_map(|i| z[i * (ds + dv) + lo..][..w].to_vec()).collect())
        };
        Some(Latents {
            s: block(0, ds)?,
            v: block(ds, dv)?,
        })
    } else {
        None
    };
    if r.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in {path:?}", bytes.len() - r.at)));
    }
    let set = Dataset {
        x: Tensor::matrix(n, d, x)?,
        labels,
        classes,
        domain,
        latents,
    };
    set.validate()?;
    Ok(set)
}

/// Writes `set` and returns the SHA-256 of the written bytes.
pub fn write_dataset(path: &Path, set: &Dataset) -> Result<String> {
    let bytes = encode(set)?;
    std::fs::write(path, &bytes)?;
    Ok(digest_hex(&bytes))
}

/// Reads a container and returns it with the SHA-256 of its bytes.
pub fn read_dataset(path: &Path) -> Result<(Dataset, String)> {
    let bytes = std::fs::read(path)?;
    Ok((decode(&bytes, path)?, digest_hex(&bytes)))
}
