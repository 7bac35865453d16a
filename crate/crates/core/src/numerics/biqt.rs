//! `BIQT` binary tensor container.
//!
//! Layout: magic `BIQT`, `u32` version (1), `u8` dtype (0 = f32), `u8` rank,
//! rank × `u64` extents, then the raw payload. All integers and floats are
//! little-endian.

use alloc::format;
use alloc::vec::Vec;

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BIQT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * t.ndim() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes one tensor from the front of `bytes`, returning it with the
/// number of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Tensor<f32>, usize)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected BIQT".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported BIQT version {version}")));
    }
    let dtype = r.take(1)?[0];
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    let rank = r.take(1)?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        if d == 0 || d > u32::MAX as u64 {
            return Err(Error::Format(format!("invalid extent {d}")));
        }
        shape.push(d as usize);
    }
    let count = numel(&shape);
    let payload = r.take(count.checked_mul(4).ok_or_else(|| Error::Format("payload size overflow".into()))?)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Tensor::new(shape, data)?, r.pos))
}

/// Decodes exactly one tensor; trailing bytes are a format error.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after tensor", bytes.len() - used)));
    }
    Ok(t)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated: need {n} bytes at offset {}, have {}", self.pos, self.bytes.len() - self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}
