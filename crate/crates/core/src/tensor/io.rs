//! `GDT1` tensor files.
//!
//! Layout: magic `GDT1`, one dtype byte (0 = f32), one rank byte (always 4),
//! four little-endian `u32` dims, then the little-endian payload.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"GDT1";
pub const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 4 + 1 + 1 + 4 * 4;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}, expected \"GDT1\"")]
    Magic([u8; 4]),
    #[error("unsupported dtype code {0}")]
    Dtype(u8),
    #[error("unsupported rank {0}, expected 4")]
    Rank(u8),
    #[error("truncated tensor file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("trailing data: expected {expected} bytes, found {actual}")]
    Trailing { expected: usize, actual: usize },
    #[error("shape mismatch: expected {expected}, found {actual}")]
    Shape { expected: Shape, actual: Shape },
    #[error("invalid shape {0}")]
    InvalidShape(Shape),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.push(DTYPE_F32);
    buf.push(4);
    for d in t.shape().dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated { expected: HEADER_LEN, actual: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
    if &magic != MAGIC {
        return Err(FormatError::Magic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated { expected: HEADER_LEN, actual: bytes.len() });
    }
    if bytes[4] != DTYPE_F32 {
        return Err(FormatError::Dtype(bytes[4]));
    }
    if bytes[5] != 4 {
        return Err(FormatError::Rank(bytes[5]));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 6 + 4 * i;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("four bytes")) as usize;
    }
    let shape = Shape::from(dims);
    let expected = HEADER_LEN + 4 * shape.numel();
    if bytes.len() < expected {
        return Err(FormatError::Truncated { expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(FormatError::Trailing { expected, actual: bytes.len() });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
        .collect();
    Tensor::from_vec(shape, data).map_err(|_| FormatError::InvalidShape(shape))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<(), FormatError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>, FormatError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Read a tensor and insist on a particular shape.
pub fn read_tensor_shaped(path: impl AsRef<Path>, expected: Shape) -> Result<Tensor<f32>, FormatError> {
    let t = read_tensor(path)?;
    if t.shape() != expected {
        return Err(FormatError::Shape { expected, actual: t.shape() });
    }
    Ok(t)
}
