//! Versioned binary checkpoint format: named tensors with shapes.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "CGSUMCK1" | u32 entry count
//! per entry: u32 name_len | name utf-8 | u32 rank | u64 dims... | f64 data...
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CGSUMCK1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error for {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic header (not a checkpoint file, or wrong version)")]
    BadMagic,
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub fn encode_checkpoint(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = r.u32("entry count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| CheckpointError::Corrupt(format!("name is not utf-8: {e}")))?
            .to_owned();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!("rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut len: usize = 1;
        for _ in 0..rank {
            let d = r.u64("dim")? as usize;
            len = len
                .checked_mul(d)
                .ok_or_else(|| CheckpointError::Corrupt("dims overflow".into()))?;
            shape.push(d);
        }
        // Validate the remaining byte budget before allocating.
        let raw = r.take(
            len.checked_mul(8)
                .ok_or_else(|| CheckpointError::Corrupt("data size overflow".into()))?,
            "tensor data",
        )?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(shape, data)));
    }
    Ok(entries)
}

pub fn write_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(entries))
        .map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let bytes = fs::read(path)
        .map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })?;
    decode_checkpoint(&bytes)
}
