//! FBT1 binary tensor encoding.
//!
//! Layout: magic `FBT1`, u8 dtype code (0 = f32, 1 = f64), u8 rank,
//! `rank` little-endian u64 extents, then the row-major little-endian payload.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::element::{DType, Element};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FBT1";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("truncated record: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("invalid tensor: {0}")]
    Invalid(String),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Appends the FBT1 encoding of `t` to `out`.
pub fn encode_into<T: Element>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out.reserve(t.len() * T::DTYPE.size_of());
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(t, &mut out);
    out
}

/// Encoded size in bytes of a tensor with this shape and dtype.
pub fn encoded_len(shape: &[usize], dtype: DType) -> usize {
    6 + 8 * shape.len() + shape.iter().product::<usize>() * dtype.size_of()
}

fn need(bytes: &[u8], n: usize) -> Result<(), FormatError> {
    if bytes.len() < n {
        Err(FormatError::Truncated {
            need: n,
            have: bytes.len(),
        })
    } else {
        Ok(())
    }
}

/// Decodes one record from the front of `bytes`, converting to `T` if the
/// stored dtype differs. Returns the tensor and the number of bytes consumed.
pub fn decode_prefix<T: Element>(bytes: &[u8]) -> Result<(Tensor<T>, usize), FormatError> {
    need(bytes, 6)?;
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if &magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let dtype = DType::from_code(bytes[4]).ok_or(FormatError::UnknownDtype(bytes[4]))?;
    let rank = bytes[5] as usize;
    need(bytes, 6 + 8 * rank)?;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[6 + 8 * i..14 + 8 * i]);
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let total = encoded_len(&shape, dtype);
    need(bytes, total)?;
    let payload = &bytes[6 + 8 * rank..total];
    let data: Vec<T> = match dtype {
        DType::F32 => payload.chunks_exact(4).map(|c| T::from_f64(f32::read_le(c) as f64)).collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
    };
    let t = Tensor::new(&shape, data).map_err(|e| FormatError::Invalid(e.to_string()))?;
    Ok((t, total))
}

pub fn decode<T: Element>(bytes: &[u8]) -> Result<Tensor<T>, FormatError> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(FormatError::Invalid(format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}

pub fn write_file<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<(), FormatError> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read_file<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>, FormatError> {
    decode(&fs::read(path)?)
}
