//! Versioned binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      8 bytes   "S2PCKPT\0"
//! version    u32
//! header_len u32, header: UTF-8 JSON (kind, config echo, counters, ...)
//! count      u32
//! count × { name_len u16, name, rank u8, dims u32 × rank, values f32 × prod(dims) }
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"S2PCKPT\0";
pub const VERSION: u32 = 1;
pub const SUPPORTED_VERSIONS: &[u32] = &[1];

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub header: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(header: Value, tensors: Vec<(String, Tensor)>) -> Self {
        Self {
            version: VERSION,
            header,
            tensors,
        }
    }

    pub fn kind(&self) -> Option<&str> {
        self.header.get("kind").and_then(Value::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for d in t.dims() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            let values: Vec<f32> = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if !SUPPORTED_VERSIONS.contains(&version) {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let header_len = read_u32(&mut r)? as usize;
        let mut header = vec![0u8; header_len];
        read_exact(&mut r, &mut header)?;
        let header: Value = serde_json::from_slice(&header)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_exact(&mut r, &mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            read_exact(&mut r, &mut rank)?;
            let dims = (0..rank[0])
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let mut raw = vec![0u8; n * 4];
            read_exact(&mut r, &mut raw)?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::from_vec(values, dims, device)?));
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after parameter block".into()));
        }
        Ok(Self {
            version,
            header,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, device)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated checkpoint".into()))
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
