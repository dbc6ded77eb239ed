//! Self-describing binary container for model and training state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "RSCKPT\0\0"
//! version    u32
//! meta_len   u64
//! meta       meta_len bytes of UTF-8 JSON
//! count      u32
//! tensors    count x { name_len u16, name, dtype u8, ndim u8, dims u64 x ndim, raw data }
//! crc32      u32 over every preceding byte
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::numerics::{DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"RSCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("checkpoint too short ({0} bytes)")]
    TooShort(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match config: {0}")]
    Mismatch(String),
}

/// Tensor payload of either precision.
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

    pub fn from_real<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }

    /// The tensor in precision `T`, if it was stored in that precision.
    pub fn into_real<T: Real>(self) -> Option<Tensor<T>> {
        match (self, T::DTYPE) {
            (AnyTensor::F32(t), DType::F32) => Some(t.cast()),
            (AnyTensor::F64(t), DType::F64) => Some(t.cast()),
            _ => None,
        }
    }
}

/// In-memory form of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: String,
    pub tensors: Vec<(String, AnyTensor)>,
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.push(T::DTYPE.code());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match t {
                AnyTensor::F32(t) => put_tensor(&mut out, t),
                AnyTensor::F64(t) => put_tensor(&mut out, t),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a container. The CRC is verified before any field is decoded,
    /// so a truncated or corrupted file never yields partial state.
    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() + 4 + 8 + 4 + 4 {
            return Err(CheckpointError::TooShort(bytes.len()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if &body[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if stored != computed {
            return Err(CheckpointError::Crc { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let meta_len = r.u64()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("meta is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
            let dtype = DType::from_code(r.u8()?)
                .ok_or_else(|| CheckpointError::Malformed(format!("unknown dtype for {name}")))?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape overflow")))?;
            let raw = r.take(numel.checked_mul(dtype.width()).ok_or_else(|| {
                CheckpointError::Malformed(format!("{name}: size overflow"))
            })?)?;
            let t = match dtype {
                DType::F32 => AnyTensor::F32(read_tensor(shape, raw)?),
                DType::F64 => AnyTensor::F64(read_tensor(shape, raw)?),
            };
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Self { meta, tensors })
    }

    /// Writes atomically: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::decode(&fs::read(path)?)
    }
}

fn read_tensor<T: Real>(shape: Vec<usize>, raw: &[u8]) -> Result<Tensor<T>, CheckpointError> {
    let w = T::DTYPE.width();
    let data = raw.chunks_exact(w).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Malformed("unexpected end of data".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            meta: r#"{"k":1}"#.into(),
            tensors: vec![
                ("a".into(), AnyTensor::F32(Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1))),
                ("b".into(), AnyTensor::F64(Tensor::scalar(-0.0))),
            ],
        }
    }

    #[test]
    fn encode_decode_encode_is_stable() {
        let bytes = sample().encode();
        let back = Container::decode(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn truncation_is_a_crc_error() {
        let bytes = sample().encode();
        for cut in [bytes.len() - 1, bytes.len() - 9, 40] {
            let err = Container::decode(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, CheckpointError::Crc { .. }), "cut {cut}: {err}");
        }
        assert!(matches!(Container::decode(&bytes[..10]), Err(CheckpointError::TooShort(10))));
    }

    #[test]
    fn wrong_version_is_reported() {
        let mut bytes = sample().encode();
        bytes[8] = 9;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(Container::decode(&bytes), Err(CheckpointError::Version { found: 9 })));
    }
}
