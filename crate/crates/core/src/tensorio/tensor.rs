//! The FOT1 tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FOT1" | dtype: u8 | rank: u32 | dims: u32 * rank | payload
//! ```
//!
//! The payload is the row-major element data with no padding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FOT1";

/// Upper bound on tensor rank accepted by the reader.
const MAX_RANK: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    U16 = 1,
    U8 = 2,
    I32 = 3,
}

impl DType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => DType::F32,
            1 => DType::U16,
            2 => DType::U8,
            3 => DType::I32,
            other => return Err(Error::Format(format!("unknown dtype code {other}"))),
        })
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::U16 => 2,
            DType::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U16(Vec<u16>),
    U8(Vec<u8>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U16(_) => DType::U16,
            TensorData::U8(_) => DType::U8,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U16(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense row-major tensor with a validated shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn element_count(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Format("tensor shape must have rank >= 1".into()));
    }
    shape.iter().try_fold(1usize, |acc, &d| {
        if d == 0 {
            return Err(Error::Format(format!("zero-sized dim in shape {shape:?}")));
        }
        acc.checked_mul(d)
            .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))
    })
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n = element_count(&shape)?;
        if n != data.len() {
            return Err(Error::Format(format!(
                "shape {shape:?} holds {n} elements but data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_i32(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Self::new(shape, TensorData::I32(data))
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(data))
    }

    pub fn from_u16(shape: Vec<usize>, data: Vec<u16>) -> Result<Self> {
        Self::new(shape, TensorData::U16(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::Format(format!("expected f32 tensor, got {:?}", other.dtype()))),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Ok(v),
            other => Err(Error::Format(format!("expected i32 tensor, got {:?}", other.dtype()))),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            other => Err(Error::Format(format!("expected u8 tensor, got {:?}", other.dtype()))),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::Format(format!("expected f32 tensor, got {:?}", other.dtype()))),
        }
    }

    pub fn into_i32(self) -> Result<Vec<i32>> {
        match self.data {
            TensorData::I32(v) => Ok(v),
            other => Err(Error::Format(format!("expected i32 tensor, got {:?}", other.dtype()))),
        }
    }

    /// Errors unless the shape equals `expected`.
    pub fn expect_shape(&self, expected: &[usize], what: &str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::Format(format!(
                "{what}: expected shape {expected:?}, found {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Bitwise equality, distinguishing NaN payloads and signed zeros.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (a, b) => a == b,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[self.dtype().code()])?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.len() * self.dtype().size());
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::U16(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => buf.extend_from_slice(v),
            TensorData::I32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        }
        w.write_all(&buf)?;
        w.flush()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Parses a complete FOT1 byte stream. Trailing bytes are rejected.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
        }
        let mut code = [0u8; 1];
        read_exact(&mut r, &mut code, "dtype")?;
        let dtype = DType::from_code(code[0])?;
        let rank = read_u32(&mut r, "rank")?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Format(format!("unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, "dims")? as usize);
        }
        let n = element_count(&shape)?;
        let bytes = n
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Format(format!("payload size of {shape:?} overflows")))?;
        let mut payload = Vec::new();
        (&mut r).take(bytes as u64)
            .read_to_end(&mut payload)
            .map_err(|e| Error::Format(format!("reading payload: {e}")))?;
        if payload.len() != bytes {
            return Err(Error::Format(format!(
                "truncated payload: expected {bytes} bytes, found {}",
                payload.len()
            )));
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe).map_err(|e| Error::Format(e.to_string()))? != 0 {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::U16 => TensorData::U16(
                payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(payload),
            DType::I32 => TensorData::I32(
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        };
        Tensor::new(shape, data)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated header ({what}): {e}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    t.write_to(BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Tensor::read_from(BufReader::new(f)).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
