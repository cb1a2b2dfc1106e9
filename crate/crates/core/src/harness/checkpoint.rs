//! Binary model files.
//!
//! Layout, little-endian: magic, `u32` version, `u32` length and bytes of a
//! JSON config echo, `u32` tensor count, then per tensor a `u16` name
//! length, the name, a `u8` rank, `u32` dims and `f32` values; finally the
//! CRC32 of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, HarnessError, SCHEMA};
use crate::autodiff::Tensor;
use crate::mdn::{ArchConfig, NetworkWeights};
use crate::token::TokenNoiseParams;
use crate::type_prior::{PriorConfig, TypePrior};

pub const MAGIC: &[u8; 8] = b"GNSCKPT\0";
pub const VERSION: u32 = 1;

/// Everything needed to score and sample: the type prior and token noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub prior: TypePrior,
    pub noise: TokenNoiseParams,
}

#[derive(Serialize, Deserialize)]
struct Echo {
    schema: String,
    arch: ArchConfig,
    prior: PriorConfig,
    noise: TokenNoiseParams,
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let echo = Echo {
        schema: SCHEMA.into(),
        arch: model.prior.arch().clone(),
        prior: model.prior.config,
        noise: model.noise.clone(),
    };
    let json = serde_json::to_vec(&echo).expect("config serializes");
    let mut out = MAGIC.to_vec();
    out.extend(VERSION.to_le_bytes());
    out.extend((json.len() as u32).to_le_bytes());
    out.extend(json);
    let tensors: Vec<_> = model.prior.weights.iter().collect();
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend((name.len() as u16).to_le_bytes());
        out.extend(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend((v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HarnessError> {
        let s = self.buf.get(self.at..self.at + n).ok_or_else(|| HarnessError::Checkpoint("truncated file".into()))?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, HarnessError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Checks integrity and, when `expected` is given, that the stored
/// architecture matches it.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ArchConfig>) -> Result<Model, HarnessError> {
    let err = |m: String| HarnessError::Checkpoint(m);
    if bytes.len() < MAGIC.len() + 12 {
        return Err(err("truncated file".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(err("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let mut r = Reader { buf: body, at: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(err(format!("version {version}, this build reads version {VERSION}")));
    }
    if crc32fast::hash(body) != stored {
        return Err(err("CRC mismatch".into()));
    }
    let n = r.u32()? as usize;
    let echo: Echo = serde_json::from_slice(r.take(n)?).map_err(|e| err(format!("config echo: {e}")))?;
    if echo.schema != SCHEMA {
        return Err(err(format!("schema {}, expected {SCHEMA}", echo.schema)));
    }
    if let Some(a) = expected {
        if *a != echo.arch {
            return Err(err("architecture differs from the configured one".into()));
        }
    }
    let count = r.u32()? as usize;
    let mut named = BTreeMap::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| err("tensor name is not UTF-8".into()))?;
        let rank = r.take(1)?[0] as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| err("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        let t = Tensor::new(shape, data).map_err(|e| err(e.to_string()))?;
        named.insert(name, t);
    }
    if r.at != body.len() {
        return Err(err("trailing bytes after tensors".into()));
    }
    let weights = NetworkWeights::from_tensors(&echo.arch, named).map_err(|e| err(e.to_string()))?;
    let prior = TypePrior::new(weights, echo.prior).map_err(|e| err(e.to_string()))?;
    echo.noise.validate().map_err(|e| err(e.to_string()))?;
    Ok(Model { prior, noise: echo.noise })
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), HarnessError> {
    fs::write(path, encode_checkpoint(model)).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path, expected: Option<&ArchConfig>) -> Result<Model, HarnessError> {
    decode_checkpoint(&fs::read(path).map_err(io_err(path))?, expected)
}
