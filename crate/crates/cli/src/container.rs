//! Binary tensor container: magic, dtype, rank, dims, little-endian f64
//! payload in row-major order, CRC32 of the payload.

use std::fs;
use std::path::Path;

use deonet_nn::Matrix;
use thiserror::Error;

pub const MAGIC: &[u8; 5] = b"DEDN1";
pub const DTYPE_F64: u8 = 0x01;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported dtype code {0:#04x}")]
    UnsupportedDtype(u8),
    #[error("truncated container: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("shape error: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, ContainerError> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(ContainerError::Shape(format!("dims {dims:?} need {n} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        let data = (0..m.nrows()).flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect();
        Self {
            dims: vec![m.nrows(), m.ncols()],
            data,
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix, ContainerError> {
        match self.dims[..] {
            [r, c] => Ok(Matrix::from_row_slice(r, c, &self.data)),
            _ => Err(ContainerError::Shape(format!("expected a matrix, got dims {:?}", self.dims))),
        }
    }

    pub fn expect_dims(self, dims: &[usize]) -> Result<Self, ContainerError> {
        if self.dims != dims {
            return Err(ContainerError::Shape(format!("expected dims {dims:?}, got {:?}", self.dims)));
        }
        Ok(self)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 8 * self.dims.len() + 8 * self.data.len() + 4);
        out.extend_from_slice(MAGIC);
        out.push(DTYPE_F64);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let start = out.len();
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(5)? != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let dtype = cur.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(ContainerError::UnsupportedDtype(dtype));
        }
        let rank = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes")) as usize;
        let mut dims = Vec::with_capacity(rank.min(64));
        for _ in 0..rank {
            let d = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
            dims.push(usize::try_from(d).map_err(|_| ContainerError::Shape(format!("dimension {d} too large")))?);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| ContainerError::Shape(format!("dims {dims:?} overflow")))?;
        let payload = cur.take(count)?;
        let stored = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
        if cur.pos != bytes.len() {
            return Err(ContainerError::TrailingBytes(bytes.len() - cur.pos));
        }
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(ContainerError::Checksum { stored, computed });
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<(), ContainerError> {
        fs::write(path, self.encode()).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, ContainerError> {
        let bytes = fs::read(path).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(ContainerError::Truncated {
            needed: self.pos.saturating_add(n),
            have: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}
