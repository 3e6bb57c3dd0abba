//! Flat binary parameter files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"TNCK" | version: u8 | records: u32
//! record := name_len: u32 | name: utf-8 | block: u32 | ndim: u32 | dims: u64 * ndim | data: f64 * prod(dims)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TNCK";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub layer: String,
    /// Parameter block within the layer (0 weights, 1 bias).
    pub index: usize,
    pub tensor: Tensor,
}

pub fn encode(records: &[CheckpointRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.layer.len() as u32).to_le_bytes());
        out.extend_from_slice(r.layer.as_bytes());
        out.extend_from_slice(&(r.index as u32).to_le_bytes());
        out.extend_from_slice(&(r.tensor.shape().len() as u32).to_le_bytes());
        for &d in r.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in r.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<CheckpointRecord>> {
    let mut c = Cursor(bytes);
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.take(1)?[0];
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let layer = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("layer name is not utf-8".into()))?;
        let index = c.u32()? as usize;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("corrupt shape".into()))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        records.push(CheckpointRecord { layer, index, tensor });
    }
    if !c.0.is_empty() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(records)
}

pub fn write_checkpoint(path: &Path, records: &[CheckpointRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(records))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointRecord>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
