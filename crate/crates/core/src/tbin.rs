//! `TBIN v1` tensor files.
//!
//! Layout: magic `TNSR`, `u32` version (1), `u8` dtype code (1 = f32, 2 = f64),
//! `u8` rank, `rank x u64` dims, then the row-major payload. All integers and
//! values are little-endian.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::tensor::{DType, Element, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TbinError {
    #[error("not a TBIN file (bad magic)")]
    BadMagic,
    #[error("unsupported TBIN version {0}")]
    BadVersion(u32),
    #[error("unknown dtype code {0}")]
    BadDType(u8),
    #[error("file is truncated")]
    Truncated,
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A decoded tensor of either element type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    /// Converts to the requested element type (a no-op when it already matches).
    pub fn into_tensor<T: Element>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Element>(tensor: &Tensor<T>) -> Vec<u8> {
    let dims = tensor.dims();
    let mut out = Vec::with_capacity(10 + 8 * dims.len() + tensor.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor, TbinError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(TbinError::BadMagic);
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(TbinError::BadVersion(version));
    }
    let code = cur.take(1)?[0];
    let dtype = DType::from_code(code).ok_or(TbinError::BadDType(code))?;
    let rank = cur.take(1)?[0] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        dims.push(usize::try_from(d).map_err(|_| TbinError::Truncated)?);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(TbinError::Truncated)?;
    let payload = cur.take(count.checked_mul(dtype.size()).ok_or(TbinError::Truncated)?)?;
    if cur.pos != bytes.len() {
        return Err(TbinError::TrailingBytes(bytes.len() - cur.pos));
    }
    Ok(match dtype {
        DType::Float32 => AnyTensor::F32(Tensor::new(&dims, read_values(payload))?),
        DType::Float64 => AnyTensor::F64(Tensor::new(&dims, read_values(payload))?),
    })
}

fn read_values<T: Element>(payload: &[u8]) -> Vec<T> {
    payload
        .chunks_exact(T::DTYPE.size())
        .map(T::read_le)
        .collect()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TbinError> {
        let end = self.pos.checked_add(n).ok_or(TbinError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(TbinError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
}

pub fn write_file<T: Element>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<(), TbinError> {
    fs::write(path, encode(tensor))?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<AnyTensor, TbinError> {
    decode(&fs::read(path)?)
}
