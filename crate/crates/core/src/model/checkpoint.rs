//! Binary checkpoint codec.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LFAT"  u32 version  u32 len  config JSON (UTF-8)
//! repeated until EOF:
//!   u32 len  name (UTF-8)  u32 rank  u64 dims[rank]  f64 values[prod(dims)]
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::config::ModelConfig;
use super::params::{ModelParams, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LFAT";
pub const FORMAT_VERSION: u32 = 1;

/// Encode parameters and config into checkpoint bytes.
pub fn encode_checkpoint(params: &ModelParams, config: &ModelConfig) -> Result<Vec<u8>> {
    let cfg_text = serde_json::to_string(config)
        .map_err(|e| Error::Format(format!("cannot serialize config: {e}")))?;
    let mut out = Vec::with_capacity(16 + cfg_text.len() + 8 * params.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_str(&mut out, &cfg_text)?;
    for t in params.tensors() {
        put_str(&mut out, &t.name)?;
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decode checkpoint bytes. Tensors must match the layout implied by the
/// stored config; data dimensions are not checked here.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams, ModelConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let cfg_text = r.string()?;
    let config: ModelConfig = serde_json::from_str(&cfg_text)
        .map_err(|e| Error::Format(format!("bad checkpoint config: {e}")))?;
    let mut tensors = Vec::new();
    while r.pos < bytes.len() {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64()?)
                .map_err(|_| Error::Format(format!("dimension overflow in '{name}'")))?;
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::Format(format!("dimension overflow in '{name}'")))?;
            shape.push(d);
        }
        let byte_len = count
            .checked_mul(8)
            .ok_or_else(|| Error::Format(format!("dimension overflow in '{name}'")))?;
        let raw = r.take(byte_len)?;
        let mut t = Tensor::zeros(name, shape);
        for (v, chunk) in t.value.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        tensors.push(t);
    }
    let params = ModelParams::from_tensors(&config, tensors)?;
    Ok((params, config))
}

pub fn checkpoint_save(params: &ModelParams, config: &ModelConfig, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params, config)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| Error::Format("string too long".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
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
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }
}
