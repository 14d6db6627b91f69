//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  b"WXNTPARM"
//! version    u32      1
//! meta_len   u32      length of the metadata block
//! meta       UTF-8    `key = value` lines
//! count      u32      number of entries
//! entry*     name_len u32, name UTF-8, flags u8 (bit 0: trainable),
//!            ndim u32, dims u64 × ndim, values f64 × product(dims)
//! ```
//!
//! Values are written bit-for-bit, so `load(save(x))` reproduces every
//! parameter exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::params::{Param, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"WXNTPARM";
pub const VERSION: u32 = 1;

/// Ordered `key = value` pairs carried next to the tensors.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Metadata {
    entries: Vec<(String, String)>,
}

impl Metadata {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Format(format!("metadata is missing `{key}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut meta = Metadata::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Format(format!("metadata line {}: expected `key = value`", n + 1)))?;
            meta.set(k.trim(), v);
        }
        Ok(meta)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamContainer {
    pub meta: Metadata,
    pub store: ParamStore,
}

impl ParamContainer {
    pub fn new(meta: Metadata, store: ParamStore) -> Self {
        ParamContainer { meta, store }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = self.meta.to_text();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for p in self.store.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(u8::from(p.trainable));
            let shape = p.tensor.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a parameter container (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        let meta = Metadata::from_text(meta_text)?;
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let trainable = r.take(1)?[0] & 1 == 1;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let tensor = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
            store.add(name, tensor, trainable)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after the last entry".into()));
        }
        Ok(ParamContainer { meta, store })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn entries(&self) -> impl Iterator<Item = &Param> {
        self.store.iter()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("unexpected end of container".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
