//! Named-tensor checkpoint file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DSUP" | version u32 = 1 | record count u32
//! per record: name_len u32 | name (UTF-8) | rank u32 | dims u32 × rank | dtype u8 (1 = f32, 2 = f64) | data
//! ```

use std::path::Path;

use thiserror::Error;

use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DSUP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("unknown dtype code {0}")]
    DType(u8),
    #[error("malformed record {name:?}: {detail}")]
    Record { name: String, detail: String },
    #[error("trailing {0} bytes after last record")]
    Trailing(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn dims(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.dims(),
            TensorData::F64(t) => t.dims(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    /// Converts to the requested element type (exact when the dtype already matches).
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            TensorData::F32(t) => t.cast(),
            TensorData::F64(t) => t.cast(),
        }
    }

    fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => TensorData::F32(t.cast()),
            DType::F64 => TensorData::F64(t.cast()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, TensorData)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn from_params<T: Scalar>(params: &[(String, Tensor<T>)]) -> Self {
        Self { tensors: params.iter().map(|(n, t)| (n.clone(), TensorData::from_tensor(t))).collect() }
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(t.dtype().code());
            match t {
                TensorData::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                TensorData::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|e| CheckpointError::Record { name: String::new(), detail: e.to_string() })?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or(CheckpointError::DType(code))?;
            let n: usize = dims.iter().product();
            let raw = r.take(n * dtype.size())?;
            let bad = |e: crate::tensor::TensorError| CheckpointError::Record { name: name.clone(), detail: e.to_string() };
            let data = match dtype {
                DType::F32 => TensorData::F32(Tensor::new(dims, raw.chunks_exact(4).map(f32::read_le).collect()).map_err(bad)?),
                DType::F64 => TensorData::F64(Tensor::new(dims, raw.chunks_exact(8).map(f64::read_le).collect()).map_err(bad)?),
            };
            tensors.push((name, data));
        }
        if r.pos != buf.len() {
            return Err(CheckpointError::Trailing(buf.len() - r.pos));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let buf = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&buf)
    }
}
