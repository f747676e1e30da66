//! Named-tensor files: a flat, ordered list of named arrays.
//!
//! Layout (little-endian): magic `NTF1`, `u32` entry count, then per entry a
//! `u16` name length, the UTF-8 name, a `u8` dtype (0 = f32, 1 = f64), a `u8`
//! rank, `rank` × `u32` dims and the row-major payload.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const MAGIC: &[u8; 4] = b"NTF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    /// Values widened to f64.
    pub data: Vec<f64>,
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(entries.len()).map_err(|_| Error::TensorFile("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for e in entries {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::TensorFile(format!("duplicate tensor name {:?}", e.name)));
        }
        let n: usize = e.shape.iter().product();
        if n != e.data.len() {
            return Err(Error::TensorFile(format!(
                "{}: shape {:?} holds {n} values, data has {}",
                e.name,
                e.shape,
                e.data.len()
            )));
        }
        let name_len = u16::try_from(e.name.len()).map_err(|_| Error::TensorFile(format!("name too long: {}", e.name)))?;
        let rank = u8::try_from(e.shape.len()).map_err(|_| Error::TensorFile(format!("{}: rank too high", e.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.dtype as u8);
        out.push(rank);
        for &d in &e.shape {
            let d = u32::try_from(d).map_err(|_| Error::TensorFile(format!("{}: dim too large", e.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match e.dtype {
            Dtype::F64 => e.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Dtype::F32 => e.data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::TensorFile(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::TensorFile("bad magic; not an NTF1 file".into()));
    }
    let count = r.u32("entry count")?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::TensorFile("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = match r.u8("dtype")? {
            0 => Dtype::F32,
            1 => Dtype::F64,
            d => return Err(Error::TensorFile(format!("{name}: unknown dtype code {d}"))),
        };
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::TensorFile(format!("{name}: shape overflows")))?;
        let bytes = n
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::TensorFile(format!("{name}: payload size overflows")))?;
        let payload = r.take(bytes, &format!("payload of {name}"))?;
        let data = match dtype {
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        if !seen.insert(name.clone()) {
            return Err(Error::TensorFile(format!("duplicate tensor name {name:?}")));
        }
        out.push(Entry { name, shape, dtype, data });
    }
    if r.pos != buf.len() {
        return Err(Error::TensorFile(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(out)
}

/// Every tensor of `p`, buffers included, as f64 entries.
pub fn entries_of(p: &dyn ParamSet) -> Vec<Entry> {
    let mut out = Vec::new();
    p.visit("", &mut |name, shape, data, _| {
        out.push(Entry {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype: Dtype::F64,
            data: data.to_vec(),
        })
    });
    out
}

pub fn save(path: impl AsRef<Path>, p: &dyn ParamSet) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(&entries_of(p))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Copies entries into `p`. Every tensor of `p` must be present with the
/// same shape, and the file may not hold names `p` lacks.
pub fn assign(p: &mut dyn ParamSet, entries: Vec<Entry>) -> Result<()> {
    let mut by_name: HashMap<String, Entry> = entries.into_iter().map(|e| (e.name.clone(), e)).collect();
    let mut missing = Vec::new();
    let mut mismatch = None;
    p.visit_mut("", &mut |name, shape, data, _| match by_name.remove(name) {
        Some(e) if e.shape == shape => data.copy_from_slice(&e.data),
        Some(e) => {
            mismatch.get_or_insert_with(|| format!("{name}: file has shape {:?}, model expects {shape:?}", e.shape));
        }
        None => missing.push(name.to_string()),
    });
    if let Some(m) = mismatch {
        return Err(Error::TensorFile(m));
    }
    if !by_name.is_empty() {
        let mut unknown: Vec<_> = by_name.into_keys().collect();
        unknown.sort();
        return Err(Error::TensorFile(format!("unknown tensors: {}", unknown.join(", "))));
    }
    if !missing.is_empty() {
        return Err(Error::TensorFile(format!("missing tensors: {}", missing.join(", "))));
    }
    Ok(())
}

/// Loads into a clone of `p`, leaving `p` untouched on error.
pub fn load_into<T: ParamSet + Clone>(path: impl AsRef<Path>, p: &T) -> Result<T> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out = p.clone();
    assign(&mut out, decode(&bytes)?)?;
    Ok(out)
}
