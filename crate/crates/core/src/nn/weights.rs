//! Binary tensor container: the magic `DMTW`, a little-endian `u32` version,
//! then one record per tensor until end of input. A record is a `u32` name
//! length, the UTF-8 name, a `u32` dimension count, `u64` dimensions and the
//! values as little-endian `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Matrix, Module};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DMTW";
pub const VERSION: u32 = 1;

pub type TensorMap = BTreeMap<String, Matrix>;

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Matrix)>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, m) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.data() {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Weights(format!("truncated at byte {}", self.pos)))?;
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

pub fn decode(bytes: &[u8]) -> Result<TensorMap> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Weights("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Weights(format!("unsupported version {version}")));
    }
    let mut map = TensorMap::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Weights("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()?;
        let dims = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [n] => (1, *n as usize),
            [a, b] => (*a as usize, *b as usize),
            _ => return Err(Error::Weights(format!("tensor {name} has {ndim} dimensions"))),
        };
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Weights(format!("tensor {name} is too large")))?;
        let raw = r.take(count.checked_mul(8).unwrap_or(usize::MAX))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        map.insert(name, Matrix::from_vec(rows, cols, data)?);
    }
    Ok(map)
}

pub fn save_tensors<'a>(path: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Matrix)>) -> Result<()> {
    fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<TensorMap> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Copies every named tensor of `module` out of `map`; fails on a missing
/// name or a shape mismatch.
pub fn load_module<M: Module>(module: &mut M, prefix: &str, map: &TensorMap) -> Result<()> {
    for (name, slot) in module.state_mut(prefix) {
        let t = map
            .get(&name)
            .ok_or_else(|| Error::Weights(format!("missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Weights(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
    }
    Ok(())
}
