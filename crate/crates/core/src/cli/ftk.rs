//! `.ftk` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "FALCONTK"
//! version      u32      1
//! dtype        u8       0 = f32, 1 = f64
//! count        u32
//! count × {
//!     name_len u32, name (UTF-8),
//!     ndim     u32, extents (ndim × u32),
//!     payload  row-major scalars
//! }
//! ```
//!
//! Tensors are held as `f64` in memory; `f32` payloads widen on read and
//! round to nearest on write.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FALCONTK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Error)]
pub enum FtkError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic at offset 0: expected \"FALCONTK\", found {found:?}")]
    BadMagic { found: String },
    #[error("unsupported version {version} at offset 8 (expected 1)")]
    UnsupportedVersion { version: u32 },
    #[error("unsupported dtype code {code} at offset 12")]
    UnsupportedDtype { code: u8 },
    #[error("truncated {field} at offset {offset}: need {needed} bytes, {available} available")]
    Truncated {
        field: String,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("duplicate tensor name \"{name}\" at offset {offset}")]
    DuplicateName { name: String, offset: usize },
    #[error("tensor name at offset {offset} is not valid UTF-8")]
    BadName { offset: usize },
    #[error("tensor \"{name}\" at offset {offset} has an invalid shape {shape:?}")]
    BadShape {
        name: String,
        offset: usize,
        shape: Vec<usize>,
    },
    #[error("{count} trailing bytes after the last tensor at offset {offset}")]
    TrailingBytes { offset: usize, count: usize },
    #[error("file holds no tensor named \"{0}\"")]
    Missing(String),
}

/// An ordered set of named tensors sharing one scalar type.
#[derive(Debug, Clone, PartialEq)]
pub struct FtkFile {
    pub dtype: Dtype,
    pub tensors: Vec<(String, Tensor)>,
}

impl FtkFile {
    pub fn new(dtype: Dtype) -> Self {
        Self {
            dtype,
            tensors: Vec::new(),
        }
    }

    pub fn with(mut self, name: impl Into<String>, tensor: Tensor) -> Self {
        self.tensors.push((name.into(), tensor));
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, FtkError> {
        self.get(name).ok_or_else(|| FtkError::Missing(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8], FtkError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(FtkError::Truncated {
                field: field.to_string(),
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, field: &str) -> Result<u32, FtkError> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<FtkFile, FtkError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(FtkError::BadMagic {
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FtkError::UnsupportedVersion { version });
    }
    let dtype = match r.take(1, "dtype")?[0] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        code => return Err(FtkError::UnsupportedDtype { code }),
    };
    let count = r.u32("tensor count")?;

    let mut file = FtkFile::new(dtype);
    let mut seen = HashSet::new();
    for i in 0..count {
        let name_at = r.pos;
        let len = r.u32(&format!("name length of tensor {i}"))? as usize;
        let name = std::str::from_utf8(r.take(len, &format!("name of tensor {i}"))?)
            .map_err(|_| FtkError::BadName { offset: name_at + 4 })?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(FtkError::DuplicateName { name, offset: name_at });
        }
        let shape_at = r.pos;
        let ndim = r.u32(&format!("ndim of \"{name}\""))? as usize;
        let mut shape = Vec::with_capacity(ndim.min(64));
        for axis in 0..ndim {
            shape.push(r.u32(&format!("extent {axis} of \"{name}\""))? as usize);
        }
        let bad_shape = || FtkError::BadShape {
            name: name.clone(),
            offset: shape_at,
            shape: shape.clone(),
        };
        if ndim == 0 || shape.contains(&0) {
            return Err(bad_shape());
        }
        let bytes_needed = shape
            .iter()
            .try_fold(dtype.width(), |acc, &e| acc.checked_mul(e))
            .ok_or_else(bad_shape)?;
        let payload = r.take(bytes_needed, &format!("payload of \"{name}\""))?;
        let data: Vec<f64> = match dtype {
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        };
        let tensor = Tensor::new(shape.clone(), data).map_err(|_| bad_shape())?;
        file.tensors.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(FtkError::TrailingBytes {
            offset: r.pos,
            count: bytes.len() - r.pos,
        });
    }
    Ok(file)
}

pub fn encode(file: &FtkFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(file.dtype.code());
    out.extend_from_slice(&(file.tensors.len() as u32).to_le_bytes());
    for (name, t) in &file.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            match file.dtype {
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    out
}

pub fn read_ftk(path: impl AsRef<Path>) -> Result<FtkFile, FtkError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| FtkError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

pub fn write_ftk(path: impl AsRef<Path>, file: &FtkFile) -> Result<(), FtkError> {
    let path = path.as_ref();
    fs::write(path, encode(file)).map_err(|source| FtkError::Io {
        path: path.display().to_string(),
        source,
    })
}
