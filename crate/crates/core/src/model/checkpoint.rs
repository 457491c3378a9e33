//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `LATM`, u32 version, u32 header length,
//! JSON header `{"version", "model", "bsq"}`, u32 tensor count, then per
//! tensor: u32 name length, UTF-8 name, u32 rank, rank × u32 dims, f32
//! payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::bsq::BsqConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LATM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub bsq: BsqConfig,
    pub params: ModelParams<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    model: ModelConfig,
    bsq: BsqConfig,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &ModelConfig, bsq: &BsqConfig, params: &ModelParams<T>) -> Result<()> {
    let header = serde_json::to_vec(&Header { version: CHECKPOINT_VERSION, model: model.clone(), bsq: bsq.clone() })?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    let tensors = params.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, m) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        for &x in m.as_slice() {
            w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::format("checkpoint: truncated"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, at: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint: bad magic"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("checkpoint: unsupported version {version}")));
    }
    let header_len = c.u32()? as usize;
    let header: Header = serde_json::from_slice(c.take(header_len)?)
        .map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    let mut params = ModelParams::<f32>::init(&header.model, &header.bsq, 0)?;
    let count = c.u32()? as usize;
    {
        let mut slots = params.tensors_mut();
        if count != slots.len() {
            return Err(Error::format(format!("checkpoint: {count} tensors, model needs {}", slots.len())));
        }
        for (expected, dst) in slots.iter_mut() {
            let name_len = c.u32()? as usize;
            let name = std::str::from_utf8(c.take(name_len)?).map_err(|_| Error::format("checkpoint: bad tensor name"))?;
            if name != expected {
                return Err(Error::format(format!("checkpoint: expected tensor {expected}, found {name}")));
            }
            let rank = c.u32()? as usize;
            let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let shape = match dims.as_slice() {
                [n] => (1, *n),
                [r, k] => (*r, *k),
                _ => return Err(Error::format(format!("checkpoint: tensor {name} has rank {rank}"))),
            };
            if shape != dst.shape() {
                return Err(Error::format(format!("checkpoint: tensor {name} has shape {shape:?}, expected {:?}", dst.shape())));
            }
            let payload = c.take(dst.len() * 4)?;
            for (x, b) in dst.as_mut_slice().iter_mut().zip(payload.chunks_exact(4)) {
                *x = f32::from_le_bytes(b.try_into().unwrap());
                if !x.is_finite() {
                    return Err(Error::format(format!("checkpoint: non-finite value in {name}")));
                }
            }
        }
    }
    if c.at != bytes.len() {
        return Err(Error::format("checkpoint: trailing bytes"));
    }
    Ok(Checkpoint { model: header.model, bsq: header.bsq, params })
}
