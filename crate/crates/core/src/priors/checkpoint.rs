//! Network checkpoint files: magic "PNPR1", a format version, the
//! architecture descriptor, a training-step counter, and the named parameter
//! tensors as embedded tensor blocks. All integers are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::priors::net::{ArchDesc, UNet};
use crate::tensor::io::{decode_tensor, encode_tensor};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 5] = b"PNPR1";
const VERSION: u32 = 1;
const MAX_PARAMS: u32 = 4096;
const MAX_NAME_LEN: u32 = 256;

/// Serialize a network body and its training-step counter.
pub fn encode_checkpoint<T: Scalar>(unet: &UNet<T>, step: u64) -> Vec<u8> {
    let arch = unet.arch();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for field in [
        arch.in_channels,
        arch.out_channels,
        arch.scales,
        arch.base_channels,
        arch.blocks_per_scale,
    ] {
        out.extend_from_slice(&(field as u32).to_le_bytes());
    }
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&(unet.params().len() as u32).to_le_bytes());
    for (name, tensor) in unet.param_names().iter().zip(unet.params()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&encode_tensor(tensor));
    }
    out
}

fn need(bytes: &[u8], at: usize, len: usize, what: &str) -> Result<()> {
    if bytes.len() < at + len {
        return Err(Error::Parse {
            offset: at,
            msg: format!("checkpoint truncated while reading {what}"),
        });
    }
    Ok(())
}

fn read_u32(bytes: &[u8], at: &mut usize, what: &str) -> Result<u32> {
    need(bytes, *at, 4, what)?;
    let v = u32::from_le_bytes(bytes[*at..*at + 4].try_into().unwrap());
    *at += 4;
    Ok(v)
}

/// Parse a checkpoint, casting parameters to `T` if they were stored in the
/// other precision.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(UNet<T>, u64)> {
    let mut at = 0usize;
    need(bytes, at, MAGIC.len(), "magic")?;
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Parse { offset: 0, msg: "bad magic, not a checkpoint".into() });
    }
    at += MAGIC.len();

    let version = read_u32(bytes, &mut at, "version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: at - 4,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }

    let in_channels = read_u32(bytes, &mut at, "in_channels")? as usize;
    let out_channels = read_u32(bytes, &mut at, "out_channels")? as usize;
    let scales = read_u32(bytes, &mut at, "scales")? as usize;
    let base_channels = read_u32(bytes, &mut at, "base_channels")? as usize;
    let blocks_per_scale = read_u32(bytes, &mut at, "blocks_per_scale")? as usize;
    let arch = ArchDesc { in_channels, out_channels, scales, base_channels, blocks_per_scale };

    need(bytes, at, 8, "step counter")?;
    let step = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    at += 8;

    let n_params = read_u32(bytes, &mut at, "parameter count")?;
    if n_params > MAX_PARAMS {
        return Err(Error::Parse {
            offset: at - 4,
            msg: format!("parameter count {n_params} exceeds limit {MAX_PARAMS}"),
        });
    }

    let mut names = Vec::with_capacity(n_params as usize);
    let mut params: Vec<Tensor<T>> = Vec::with_capacity(n_params as usize);
    for _ in 0..n_params {
        let name_len = read_u32(bytes, &mut at, "name length")?;
        if name_len > MAX_NAME_LEN {
            return Err(Error::Parse {
                offset: at - 4,
                msg: format!("name length {name_len} exceeds limit {MAX_NAME_LEN}"),
            });
        }
        need(bytes, at, name_len as usize, "parameter name")?;
        let name = std::str::from_utf8(&bytes[at..at + name_len as usize])
            .map_err(|_| Error::Parse { offset: at, msg: "parameter name is not UTF-8".into() })?
            .to_string();
        at += name_len as usize;
        let (tensor, consumed) = decode_tensor(bytes, at)?;
        at += consumed;
        names.push(name);
        params.push(tensor.cast_to::<T>());
    }
    if at != bytes.len() {
        return Err(Error::Parse {
            offset: at,
            msg: format!("{} trailing bytes after checkpoint payload", bytes.len() - at),
        });
    }

    let unet = UNet::from_params(arch, names, params)?;
    Ok((unet, step))
}

/// Write a checkpoint file.
pub fn save_checkpoint<T: Scalar>(path: &Path, unet: &UNet<T>, step: u64) -> Result<()> {
    std::fs::write(path, encode_checkpoint(unet, step))?;
    Ok(())
}

/// Read a checkpoint file, casting to `T` as needed.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(UNet<T>, u64)> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
}
