//! Binary tensor files.
//!
//! ```text
//! "DTNS"  version: u32  rank: u32  dims: u64 × rank  data: f64 × Π dims
//! ```
//!
//! Every integer and float is little-endian.

use std::path::Path;

use dolphin_core::Tensor;

use crate::error::{AppError, Result};
use crate::fsio;

pub const MAGIC: [u8; 4] = *b"DTNS";
pub const VERSION: u32 = 1;
/// Ranks above this are rejected when reading, as a guard against garbage headers.
pub const MAX_RANK: usize = 16;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.rank() + 8 * t.numel());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a whole blob; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err("not a tensor blob (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported blob version {version}"));
    }
    let rank = r.u32()? as usize;
    if rank > MAX_RANK {
        return Err(format!("rank {rank} exceeds {MAX_RANK}"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let d = usize::try_from(r.u64()?)
            .map_err(|_| "dimension does not fit in memory".to_string())?;
        numel = numel.checked_mul(d).ok_or("element count overflows")?;
        shape.push(d);
    }
    let payload = numel.checked_mul(8).ok_or("payload size overflows")?;
    if r.remaining() != payload {
        return Err(format!(
            "payload is {} bytes, header implies {payload}",
            r.remaining()
        ));
    }
    let data = r
        .take(payload)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&shape, data).map_err(|e| e.to_string())
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    fsio::write_atomic(path, &encode(t))
}

pub fn load(path: &Path) -> Result<Tensor> {
    decode(&fsio::read(path)?).map_err(|reason| AppError::format(path, reason))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or("blob is truncated")?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }
}
