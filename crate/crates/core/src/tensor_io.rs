//! Portable little-endian tensor container.
//!
//! Layout, with no padding:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `UITF` |
//! | 2     | version, `u16` LE, currently 1 |
//! | 1     | dtype code: 1 = f32, 2 = f64 |
//! | 1     | ndim, at most 4 |
//! | 4 * ndim | shape, `u32` LE each |
//! | ...   | row-major payload, LE |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"UITF";
pub const VERSION: u16 = 1;
pub const MAX_NDIM: usize = 4;

/// A decoded tensor of either supported element type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn into_f32(self) -> Option<Tensor<f32>> {
        match self {
            AnyTensor::F32(t) => Some(t),
            AnyTensor::F64(_) => None,
        }
    }

    pub fn into_f64(self) -> Option<Tensor<f64>> {
        match self {
            AnyTensor::F64(t) => Some(t),
            AnyTensor::F32(_) => None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        match self {
            AnyTensor::F32(t) => encode(t),
            AnyTensor::F64(t) => encode(t),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

pub fn encode<T: Scalar>(tensor: &Tensor<T>) -> Result<Vec<u8>> {
    if tensor.ndim() > MAX_NDIM {
        return Err(Error::Format(format!(
            "tensor has {} dimensions, at most {MAX_NDIM} are supported",
            tensor.ndim()
        )));
    }
    let mut out = Vec::with_capacity(8 + 4 * tensor.ndim() + tensor.len() * T::DTYPE.size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(tensor.ndim() as u8);
    for &dim in tensor.shape() {
        let dim = u32::try_from(dim).map_err(|_| Error::Format(format!("dimension {dim} exceeds u32")))?;
        out.extend_from_slice(&dim.to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

fn payload<T: Scalar>(shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor<T>> {
    let data = bytes.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    if bytes.len() < 8 {
        return Err(Error::Format(format!("header truncated at {} bytes", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = DType::from_code(bytes[6]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[6])))?;
    let ndim = bytes[7] as usize;
    if ndim > MAX_NDIM {
        return Err(Error::Format(format!("ndim {ndim} exceeds {MAX_NDIM}")));
    }
    let header = 8 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Format("shape truncated".into()));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected = shape
        .iter()
        .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
    let body = &bytes[header..];
    if body.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, shape {shape:?} needs {expected}",
            body.len()
        )));
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(payload(shape, body)?),
        DType::F64 => AnyTensor::F64(payload(shape, body)?),
    })
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(tensor)?)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    decode(&fs::read(path)?)
}

/// Reads a tensor and requires element type `T`.
pub fn read_tensor_as<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    match read_tensor(path)? {
        AnyTensor::F32(t) if T::DTYPE == DType::F32 => Ok(t.cast()),
        AnyTensor::F64(t) if T::DTYPE == DType::F64 => Ok(t.cast()),
        other => Err(Error::Format(format!(
            "{} holds {:?}, expected {:?}",
            path.display(),
            other.dtype(),
            T::DTYPE
        ))),
    }
}
