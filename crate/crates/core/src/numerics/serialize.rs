//! Binary archive of named tensors with an opaque UTF-8 header.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"CDTN"              magic
//! u32                  format version (1)
//! u32, [u8]            header length, header bytes (UTF-8, usually JSON)
//! u32                  tensor count
//! per tensor:
//!   u32, [u8]          name length, name bytes (UTF-8)
//!   u32, [u64]         rank, dimensions
//!   [f64]              values, row-major
//! [u8; 32]             SHA-256 of every preceding byte
//! ```

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"CDTN";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("not a tensor archive (bad magic)")]
    BadMagic,
    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u32),
    #[error("archive truncated")]
    Truncated,
    #[error("archive checksum mismatch")]
    ChecksumMismatch,
    #[error("invalid UTF-8 in archive")]
    InvalidUtf8,
    #[error("invalid tensor `{0}`")]
    InvalidTensor(String),
}

/// Serializes `header` and `tensors` into the archive layout.
pub fn encode(header: &str, tensors: &[(String, Tensor)]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|(n, t)| 12 + n.len() + 8 * (t.shape().len() + t.numel())).sum();
    let mut out = Vec::with_capacity(48 + header.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode(bytes: &[u8]) -> Result<(String, Vec<(String, Tensor)>), FormatError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < 4 + 4 + 4 + 4 + 32 {
        return Err(FormatError::Truncated);
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(FormatError::ChecksumMismatch);
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let hlen = r.u32()? as usize;
    let header = r.string(hlen)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = r.string(nlen)?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::InvalidTensor(name.clone()))?;
        if numel.checked_mul(8).is_none_or(|b| b > r.remaining()) {
            return Err(FormatError::Truncated);
        }
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let t = Tensor::new(shape, data).map_err(|_| FormatError::InvalidTensor(name.clone()))?;
        tensors.push((name, t));
    }
    if r.remaining() != 0 {
        return Err(FormatError::InvalidTensor("trailing bytes".into()));
    }
    Ok((header, tensors))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&[u8], FormatError> {
        if n > self.remaining() {
            return Err(FormatError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String, FormatError> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| FormatError::InvalidUtf8)
    }
}
