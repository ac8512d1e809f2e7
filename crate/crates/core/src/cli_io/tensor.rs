//! `TRAV1` tensor container: 5-byte magic, dtype code, rank, u32 dims, then
//! a row-major little-endian payload.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 5] = b"TRAV1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    /// Values widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("byte {offset}: bad magic, expected \"TRAV1\"")]
    BadMagic { offset: usize },
    #[error("byte {offset}: unknown dtype code {code}")]
    BadDtype { offset: usize, code: u8 },
    #[error("byte {offset}: truncated {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("byte {offset}: payload length {got} bytes, dims require {expected}")]
    PayloadLength { offset: usize, expected: usize, got: usize },
    #[error("tensor has {elements} elements but dims {dims:?}")]
    Shape { dims: Vec<usize>, elements: usize },
    #[error("expected dims {expected:?}, found {found:?}")]
    UnexpectedDims { expected: Vec<usize>, found: Vec<usize> },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Tensor {
    pub fn f64(dims: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::F64(values))
    }

    pub fn f32(dims: Vec<usize>, values: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::F32(values))
    }

    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        let elements = data.len();
        if dims.len() > u8::MAX as usize
            || dims.iter().any(|&d| d > u32::MAX as usize)
            || dims.iter().product::<usize>() != elements
        {
            return Err(TensorError::Shape { dims, elements });
        }
        Ok(Self { dims, data })
    }

    pub fn element_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn expect_dims(&self, expected: &[usize]) -> Result<(), TensorError> {
        if self.dims != expected {
            return Err(TensorError::UnexpectedDims {
                expected: expected.to_vec(),
                found: self.dims.clone(),
            });
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 4 * self.dims.len() + self.data.len() * self.data.dtype().size());
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(self.data.dtype() as u8);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    /// Parses exactly one tensor occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self, TensorError> {
        let (tensor, used) = Self::decode_prefix(bytes, 0, false)?;
        if used != bytes.len() {
            let header = used - tensor.element_count() * tensor.data.dtype().size();
            return Err(TensorError::PayloadLength {
                offset: header,
                expected: used - header,
                got: bytes.len() - header,
            });
        }
        Ok(tensor)
    }

    /// Parses one tensor at the start of `bytes`, returning it and the
    /// number of bytes consumed. `base` offsets error positions. With
    /// `stream` unset a short payload is a payload-length error, otherwise
    /// a truncation.
    pub fn decode_prefix(bytes: &[u8], base: usize, stream: bool) -> Result<(Self, usize), TensorError> {
        let mut pos = 0;
        let take = |pos: &mut usize, n: usize, what: &'static str| -> Result<&[u8], TensorError> {
            let slice = bytes.get(*pos..*pos + n).ok_or(TensorError::Truncated {
                offset: base + *pos,
                what,
            })?;
            *pos += n;
            Ok(slice)
        };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(TensorError::BadMagic { offset: base });
        }
        pos += MAGIC.len();
        let code = take(&mut pos, 1, "dtype")?[0];
        let dtype = DType::from_code(code).ok_or(TensorError::BadDtype {
            offset: base + pos - 1,
            code,
        })?;
        let ndim = take(&mut pos, 1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let b = take(&mut pos, 4, "dims")?;
            dims.push(u32::from_le_bytes(b.try_into().unwrap()) as usize);
        }
        let count: usize = dims.iter().product();
        let need = count * dtype.size();
        let avail = bytes.len() - pos;
        if avail < need {
            if stream {
                return Err(TensorError::Truncated {
                    offset: base + bytes.len(),
                    what: "payload",
                });
            }
            return Err(TensorError::PayloadLength {
                offset: base + pos,
                expected: need,
                got: avail,
            });
        }
        let payload = &bytes[pos..pos + need];
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok((Tensor { dims, data }, pos + need))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), TensorError> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, TensorError> {
        Self::decode(&fs::read(path)?)
    }
}

/// Parses back-to-back tensors filling all of `bytes`.
pub fn decode_all(bytes: &[u8]) -> Result<Vec<Tensor>, TensorError> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let (t, used) = Tensor::decode_prefix(&bytes[pos..], pos, true)?;
        out.push(t);
        pos += used;
    }
    Ok(out)
}
