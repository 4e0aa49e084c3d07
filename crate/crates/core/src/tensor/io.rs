//! Portable tensor file format.
//!
//! Layout: magic `PTNS1`, rank as `u32`, one `u64` per extent, a dtype code
//! byte (1 = f32, 2 = f64), then the raw little-endian element buffer.
//! Truncated or oversized inputs are rejected with the byte offset at fault.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

pub const MAGIC: &[u8; 5] = b"PTNS1";

/// Maximum rank accepted by the reader; guards against garbage headers.
const MAX_RANK: u32 = 8;

/// A tensor of either supported dtype, as found in a file.
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyTensor::F32(_) => Dtype::F32,
            AnyTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Convert to the requested dtype, casting if necessary.
    pub fn cast_to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + t.numel() * T::DTYPE.size_bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out.push(T::DTYPE.code());
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes_vec());
    }
    out
}

fn need(bytes: &[u8], at: usize, len: usize, what: &str) -> Result<()> {
    if at + len > bytes.len() {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("truncated while reading {what} ({len} bytes needed at {at})"),
        });
    }
    Ok(())
}

/// Decode one tensor starting at `start`; returns the tensor and the number of
/// bytes consumed. Offsets in errors are absolute within `bytes`.
pub fn decode_tensor(bytes: &[u8], start: usize) -> Result<(AnyTensor, usize)> {
    let mut at = start;
    need(bytes, at, MAGIC.len(), "magic")?;
    if &bytes[at..at + MAGIC.len()] != MAGIC {
        return Err(Error::Parse {
            offset: at,
            msg: "bad magic, not a tensor block".into(),
        });
    }
    at += MAGIC.len();

    need(bytes, at, 4, "rank")?;
    let rank = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    at += 4;
    if rank > MAX_RANK {
        return Err(Error::Parse {
            offset: at - 4,
            msg: format!("rank {rank} exceeds supported maximum {MAX_RANK}"),
        });
    }

    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: u128 = 1;
    for _ in 0..rank {
        need(bytes, at, 8, "extent")?;
        let e = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        at += 8;
        numel = numel.saturating_mul(e as u128);
        shape.push(e as usize);
    }
    if numel > (1 << 33) {
        return Err(Error::Parse {
            offset: start,
            msg: format!("element count {numel} is implausibly large"),
        });
    }
    let numel = numel as usize;

    need(bytes, at, 1, "dtype code")?;
    let code = bytes[at];
    at += 1;
    let dtype = Dtype::from_code(code).ok_or(Error::Parse {
        offset: at - 1,
        msg: format!("unknown dtype code {code}"),
    })?;

    let payload = numel * dtype.size_bytes();
    need(bytes, at, payload, "element buffer")?;
    let buf = &bytes[at..at + payload];
    at += payload;

    let tensor = match dtype {
        Dtype::F32 => {
            let data: Vec<f32> = buf.chunks_exact(4).map(f32::from_le_slice).collect();
            AnyTensor::F32(Tensor::from_vec(shape, data)?)
        }
        Dtype::F64 => {
            let data: Vec<f64> = buf.chunks_exact(8).map(f64::from_le_slice).collect();
            AnyTensor::F64(Tensor::from_vec(shape, data)?)
        }
    };
    Ok((tensor, at - start))
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode_tensor(t))?;
    Ok(())
}

/// Read a whole file as a single tensor; trailing bytes are an error.
pub fn read_tensor(path: &Path) -> Result<AnyTensor> {
    let bytes = std::fs::read(path)?;
    let (t, used) = decode_tensor(&bytes, 0)?;
    if used != bytes.len() {
        return Err(Error::Parse {
            offset: used,
            msg: format!("{} trailing bytes after tensor", bytes.len() - used),
        });
    }
    Ok(t)
}

pub fn read_tensor_as<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    Ok(read_tensor(path)?.cast_to())
}
