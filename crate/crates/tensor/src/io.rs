//! Raw tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MSTN" | version: u16 | rank: u16 | extents: rank x u64 | dtype flag: u8 | data
//! ```
//!
//! The flag byte is the scalar width in bytes (4 or 8) and the data are
//! IEEE-754 floats of that width. Several containers may be concatenated
//! in one stream; [`read_tensor`] consumes exactly one.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::element::{DType, Element};
use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"MSTN";
pub const VERSION: u16 = 1;

/// A decoded container, in whatever precision it was written.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: RawData,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RawData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl RawTensor {
    pub fn dtype(&self) -> DType {
        match self.data {
            RawData::F32(_) => DType::F32,
            RawData::F64(_) => DType::F64,
        }
    }

    /// Converts to the requested precision.
    pub fn into_vec<F: Element>(self) -> Vec<F> {
        match self.data {
            RawData::F32(v) => v.into_iter().map(|x| F::lit(x as f64)).collect(),
            RawData::F64(v) => v.into_iter().map(F::lit).collect(),
        }
    }
}

pub fn write_tensor<F: Element, W: Write>(w: &mut W, shape: &[usize], data: &[F]) -> Result<()> {
    if numel(shape) != data.len() {
        return Err(TensorError::Format(format!(
            "shape {shape:?} does not match {} values",
            data.len()
        )));
    }
    let rank = u16::try_from(shape.len()).map_err(|_| TensorError::Format("rank exceeds u16".into()))?;
    let mut buf = Vec::with_capacity(9 + 8 * shape.len() + data.len() * F::DTYPE.size());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&rank.to_le_bytes());
    for &e in shape {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    buf.push(F::DTYPE.flag());
    for &v in data {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<RawTensor> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let rank = u16::from_le_bytes([head[6], head[7]]) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut e = [0u8; 8];
        r.read_exact(&mut e)?;
        shape.push(
            usize::try_from(u64::from_le_bytes(e))
                .map_err(|_| TensorError::Format("extent overflows usize".into()))?,
        );
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let dtype = DType::from_flag(flag[0])
        .ok_or_else(|| TensorError::Format(format!("unknown dtype flag {}", flag[0])))?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| TensorError::Format("element count overflows".into()))?;
    let mut bytes = vec![0u8; n * dtype.size()];
    r.read_exact(&mut bytes)?;
    let data = match dtype {
        DType::F32 => RawData::F32(bytes.chunks_exact(4).map(f32::read_le).collect()),
        DType::F64 => RawData::F64(bytes.chunks_exact(8).map(f64::read_le).collect()),
    };
    Ok(RawTensor { shape, data })
}

impl<F: Element> Tensor<F> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_tensor(&mut w, self.shape(), self.data())?;
        w.flush()?;
        Ok(())
    }

    /// Loads a container, converting precision if needed. The result is a
    /// constant; wrap it with [`Tensor::param`] to train it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let raw = read_tensor(&mut BufReader::new(File::open(path)?))?;
        let shape = raw.shape.clone();
        Tensor::from_vec(raw.into_vec(), &shape)
    }
}
