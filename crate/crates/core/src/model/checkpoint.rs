//! Single-file model archive.
//!
//! Layout (little-endian):
//! `b"MFCK"`, format version `u32`, metadata length `u32`, metadata JSON,
//! tensor count `u32`, then per tensor: name length `u16`, UTF-8 name,
//! trainable flag `u8`, rows `u32`, cols `u32`, `rows·cols` `f32` values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureNorm, ModelParameters, VectorFieldModel, VectorFieldModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const MAGIC: &[u8; 4] = b"MFCK";
pub const FORMAT_VERSION: u32 = 1;

const MAX_META: usize = 1 << 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: VectorFieldModelConfig,
    pub norm: FeatureNorm,
    /// Optimiser steps taken so far.
    pub step: u64,
    /// Free-form provenance (training config, parent checkpoint, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub format_version: u32,
    pub meta: CheckpointMeta,
    pub params: ModelParameters,
}

impl Checkpoint {
    pub fn from_model(model: &VectorFieldModel, step: u64, extra: serde_json::Value) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            meta: CheckpointMeta {
                model: model.config().clone(),
                norm: model.norm(),
                step,
                extra,
            },
            params: model.params().clone(),
        }
    }

    pub fn into_model(self) -> Result<VectorFieldModel> {
        VectorFieldModel::from_parts(self.meta.model, self.params, self.meta.norm)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec_pretty(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&u32::try_from(meta.len()).map_err(|_| fmt("metadata too large"))?.to_le_bytes());
        out.extend_from_slice(&meta);
        let entries = self.params.entries();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for e in entries {
            let name = e.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| fmt("tensor name too long"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(u8::from(e.trainable));
            out.extend_from_slice(&(e.value.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(e.value.cols() as u32).to_le_bytes());
            for &v in e.value.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parse an archive. Only structural validity is checked here; use
    /// [`Checkpoint::into_model`] to match tensors against the config.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(fmt("bad magic"));
        }
        let format_version = r.u32()?;
        if format_version != FORMAT_VERSION {
            return Err(fmt(format!("unsupported format version {format_version}")));
        }
        let meta_len = r.u32()? as usize;
        if meta_len > MAX_META {
            return Err(fmt("metadata too large"));
        }
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| fmt(format!("metadata: {e}")))?;
        let n = r.u32()? as usize;
        let mut params = ModelParameters::new();
        for _ in 0..n {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| fmt("tensor name is not UTF-8"))?
                .to_string();
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(fmt(format!("bad trainable flag {b}"))),
            };
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let count = rows
                .checked_mul(cols)
                .filter(|c| c.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| fmt(format!("tensor {name} exceeds archive size")))?;
            let raw = r.take(count * 4)?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(fmt(format!("tensor {name} has non-finite values")));
            }
            let m = Mat::from_vec(rows, cols, data)?;
            params
                .insert(name, m, trainable)
                .map_err(|e| fmt(e.to_string()))?;
        }
        if r.remaining() != 0 {
            return Err(fmt("trailing bytes"));
        }
        Ok(Checkpoint {
            format_version,
            meta,
            params,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }
}

fn fmt(reason: impl Into<String>) -> Error {
    Error::format("checkpoint", reason)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(fmt("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
