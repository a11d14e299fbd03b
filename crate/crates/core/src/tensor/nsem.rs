//! `NSEM` binary tensor files.
//!
//! Layout: magic `NSEM`, version `u32 = 1`, dtype `u8` (0 = f32, 1 = f64),
//! ndim `u8`, dims as `u64`, then the row-major payload. All little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NSEM";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Data(format!("unknown NSEM dtype {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// A tensor read without knowing its dtype in advance.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn into_f64(self) -> Tensor<f64> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t,
        }
    }

    pub fn into_f32(self) -> Tensor<f32> {
        match self {
            AnyTensor::F32(t) => t,
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn write_nsem_to<T: Real, W: Write>(mut w: W, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * t.ndim() + t.numel() * T::DTYPE.width());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(T::DTYPE as u8);
    let ndim = u8::try_from(t.ndim()).map_err(|_| Error::Data("tensor has more than 255 dims".into()))?;
    buf.push(ndim);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_nsem_any_from<R: Read>(mut r: R) -> Result<AnyTensor> {
    let mut head = [0u8; 10];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Data("missing NSEM magic".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Data(format!("unsupported NSEM version {version}")));
    }
    let dtype = DType::from_byte(head[8])?;
    let ndim = head[9] as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut d = [0u8; 8];
    for _ in 0..ndim {
        r.read_exact(&mut d)?;
        shape.push(usize::try_from(u64::from_le_bytes(d)).map_err(|_| Error::Data("dimension overflows usize".into()))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &x| acc.checked_mul(x))
        .ok_or_else(|| Error::Data("NSEM element count overflows".into()))?;
    let mut payload = vec![0u8; numel * dtype.width()];
    r.read_exact(&mut payload)?;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(Tensor::new(shape, payload.chunks_exact(4).map(f32::read_le).collect())?),
        DType::F64 => AnyTensor::F64(Tensor::new(shape, payload.chunks_exact(8).map(f64::read_le).collect())?),
    })
}

/// Reads one tensor, converting to `T` if the stored dtype differs.
pub fn read_nsem_from<T: Real, R: Read>(r: R) -> Result<Tensor<T>> {
    Ok(match read_nsem_any_from(r)? {
        AnyTensor::F32(t) => t.cast(),
        AnyTensor::F64(t) => t.cast(),
    })
}

pub fn write_nsem<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(f);
    write_nsem_to(&mut w, t)?;
    w.flush().map_err(|e| Error::file(path, e))
}

pub fn read_nsem<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    Ok(match read_nsem_any(path)? {
        AnyTensor::F32(t) => t.cast(),
        AnyTensor::F64(t) => t.cast(),
    })
}

pub fn read_nsem_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    read_nsem_any_from(BufReader::new(f))
}
