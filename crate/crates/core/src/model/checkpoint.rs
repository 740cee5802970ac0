//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `ALRP`, `u32` version, `u32` length + UTF-8 JSON
//! header (model config and free-form metadata), `u32` tensor count, then per
//! tensor `u32` name length, name, `u32` rank, `u32` dims, `u64` payload offset
//! in elements; finally `u64` payload length and the `f32` payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tape::Params;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ALRP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(default)]
    meta: Value,
}

/// A model together with free-form metadata (task, seed, training metrics).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: Value,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn new(model: Model, meta: Value) -> Self {
        Self { model, meta }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            config: self.model.config.clone(),
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in self.model.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += t.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, t) in self.model.params.iter() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| Error::Format("missing magic".into()))? != MAGIC {
            return Err(Error::Format("bad magic (expected ALRP)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Format(format!("invalid header: {e}")))?;
        header.config.validate()?;
        let n = r.u32()? as usize;
        let mut table = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            table.push((name, shape, offset));
        }
        let total = r.u64()?;
        let payload = r.take(
            usize::try_from(total)
                .ok()
                .and_then(|t| t.checked_mul(4))
                .ok_or_else(|| Error::Format("payload too large".into()))?,
        )?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        let mut expected = 0u64;
        let mut params = Params::new();
        for (name, shape, offset) in table {
            let len: usize = shape.iter().product();
            if offset != expected {
                return Err(Error::Format(format!("tensor {name} has overlapping or out-of-order offset")));
            }
            expected += len as u64;
            if expected > total {
                return Err(Error::Format(format!("tensor {name} extends past the payload")));
            }
            let start = offset as usize * 4;
            let data = payload[start..start + len * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            params
                .insert(name, Tensor::new(shape, data)?)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        if expected != total {
            return Err(Error::Format("payload length does not match the tensor table".into()));
        }
        let reference = Model::init(header.config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Format(format!("missing tensor {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!("tensor {name} has shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Format("unexpected extra tensors".into()));
        }
        Ok(Self {
            model: Model {
                config: header.config,
                params,
            },
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    /// Round-trips the weights through `f32`, as saving and loading would.
    pub fn quantized(model: Model) -> Model {
        let mut params = Params::new();
        for (name, t) in model.params.iter() {
            params
                .insert(name, t.map(|v| v as f32 as f64))
                .expect("names are unique");
        }
        Model { params, ..model }
    }
}
