//! Named-tensor checkpoint files.
//!
//! Layout, all integers little-endian `u64`, all reals little-endian `f64`:
//!
//! ```text
//! "PSRD1" | count | { name_len | name (UTF-8) | rank | extents[rank] | data[Π extents] } × count
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"PSRD1";

pub fn encode<T: Real>(tensors: &BTreeMap<String, Tensor<T>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format(format!("count {v} too large")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("missing PSRD1 checkpoint header".into()));
    }
    let count = c.u64()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = c.u64()?;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = c.u64()?;
        let shape = (0..rank).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Format(format!("tensor {name} too large")))?;
        if n.saturating_mul(8) > bytes.len() {
            return Err(Error::Format(format!("tensor {name} larger than the file")));
        }
        let data = (0..n)
            .map(|_| c.f64().map(|v| T::from_f64(v).expect("real")))
            .collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn save<T: Real>(path: &Path, tensors: &BTreeMap<String, Tensor<T>>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
