//! SPCK checkpoint files.
//!
//! Layout: the magic `SPCK`, a little-endian `u32` format version, a
//! little-endian `u64` header length, the JSON header, then every tensor as
//! raw little-endian `f32` values at the byte offsets listed in the header
//! (relative to the start of the payload).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    dropout_step: u64,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

impl Model<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let tensors = self
            .named_tensors()
            .map(|(name, _, t)| {
                let e = Entry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            dropout_step: self.dropout_step,
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, at: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format("not an SPCK checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
        let header_len = usize::try_from(header_len).map_err(|_| Error::format("header length overflows"))?;
        let header: Header = serde_json::from_slice(cur.take(header_len)?)
            .map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
        let mut model = Model::new(header.config).map_err(|e| Error::format(format!("checkpoint config: {e}")))?;
        model.dropout_step = header.dropout_step;
        if header.tensors.len() != model.tensors.len() {
            return Err(Error::format(format!(
                "checkpoint lists {} tensors, configuration needs {}",
                header.tensors.len(),
                model.tensors.len()
            )));
        }
        let payload = &bytes[cur.at..];
        let mut expected_offset = 0u64;
        for ((entry, slot), tensor) in header.tensors.iter().zip(&model.layout.slots).zip(&mut model.tensors) {
            if entry.name != slot.name || entry.shape != slot.shape {
                return Err(Error::format(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    entry.name, entry.shape, slot.name, slot.shape
                )));
            }
            if entry.offset != expected_offset {
                return Err(Error::format(format!("tensor {} has offset {}", entry.name, entry.offset)));
            }
            let n = tensor.len();
            let start = entry.offset as usize;
            let end = start + 4 * n;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| Error::format(format!("checkpoint truncated inside tensor {}", entry.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            *tensor = Tensor::new(slot.shape.clone(), data)?;
            expected_offset = end as u64;
        }
        if payload.len() as u64 != expected_offset {
            return Err(Error::format(format!(
                "checkpoint has {} trailing bytes",
                payload.len() as u64 - expected_offset.min(payload.len() as u64)
            )));
        }
        Ok(model)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint truncated"))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Model::from_bytes(&bytes)
}
