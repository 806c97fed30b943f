//! Binary tensor files.
//!
//! Layout: magic `PRTK`, version byte `1`, `u8` rank, little-endian `u32`
//! extents, then the row-major payload as little-endian `f32`. Values are
//! stored single-precision, so a write/read round trip quantizes.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::Tensor;
use thiserror::Error;

pub const TENSOR_MAGIC: [u8; 4] = *b"PRTK";
pub const TENSOR_FORMAT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a tensor file (bad magic)")]
    BadMagic,
    #[error("unsupported tensor format version {got} (expected {TENSOR_FORMAT_VERSION})")]
    FormatVersionMismatch { got: u8 },
    #[error("file ends before the declared payload")]
    Truncated,
    #[error("declared shape is invalid: {detail}")]
    BadShape { detail: String },
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<(), TensorIoError> {
    let shape = tensor.shape();
    if shape.len() > u8::MAX as usize || shape.iter().any(|&e| e > u32::MAX as usize) {
        return Err(TensorIoError::BadShape {
            detail: format!("{shape:?} does not fit the header"),
        });
    }
    let data = tensor.borrow_data();
    let mut out = Vec::with_capacity(6 + 4 * shape.len() + 4 * data.len());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.push(TENSOR_FORMAT_VERSION);
    out.push(shape.len() as u8);
    for &e in &shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in data.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor, TensorIoError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 6 {
        return Err(TensorIoError::Truncated);
    }
    if bytes[..4] != TENSOR_MAGIC {
        return Err(TensorIoError::BadMagic);
    }
    if bytes[4] != TENSOR_FORMAT_VERSION {
        return Err(TensorIoError::FormatVersionMismatch { got: bytes[4] });
    }
    let rank = bytes[5] as usize;
    let header_end = 6 + 4 * rank;
    if bytes.len() < header_end {
        return Err(TensorIoError::Truncated);
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = 6 + 4 * i;
        let extent = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        shape.push(extent as usize);
    }
    if shape.is_empty() || shape.iter().any(|&e| e == 0) {
        return Err(TensorIoError::BadShape {
            detail: format!("{shape:?}"),
        });
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != header_end + 4 * numel {
        return Err(TensorIoError::Truncated);
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let at = header_end + 4 * i;
        let v = f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        data.push(v as f64);
    }
    Tensor::from_vec(data, &shape).map_err(|e| TensorIoError::BadShape {
        detail: e.to_string(),
    })
}
