//! Versioned binary parameter container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "LMPCCKPT"
//! version      u32      FORMAT_VERSION
//! entry count  u32
//! entry*:
//!   name len   u32, then UTF-8 name bytes
//!   kind       u8       0 = network, 1 = f64 array, 2 = text
//!   network:   u32 layer count L, L-1 activation tags (u8: 0 elu, 1 tanh, 2 identity),
//!              then per layer: u32 out, u32 in, out*in f64 weights (row-major), out f64 biases
//!   f64 array: u64 length, values
//!   text:      u64 byte length, UTF-8 bytes
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{Activation, Dense, Mlp};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LMPCCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Network(Mlp),
    Array(Vec<f64>),
    Text(String),
}

/// Ordered list of named entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    entries: Vec<(String, Entry)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, entry: Entry) {
        self.entries.push((name.into(), entry));
    }

    pub fn entries(&self) -> &[(String, Entry)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn network(&self, name: &str) -> Result<Mlp> {
        match self.get(name) {
            Some(Entry::Network(m)) => Ok(m.clone()),
            _ => Err(Error::Checkpoint(format!("missing network entry '{name}'"))),
        }
    }

    pub fn array(&self, name: &str) -> Result<Vec<f64>> {
        match self.get(name) {
            Some(Entry::Array(v)) => Ok(v.clone()),
            _ => Err(Error::Checkpoint(format!("missing array entry '{name}'"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<String> {
        match self.get(name) {
            Some(Entry::Text(s)) => Ok(s.clone()),
            _ => Err(Error::Checkpoint(format!("missing text entry '{name}'"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::Network(net) => {
                    out.push(0);
                    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
                    out.extend(net.activations().iter().map(|a| a.tag()));
                    for layer in net.layers() {
                        out.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
                        out.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
                        for v in layer.weights().iter().chain(layer.bias()) {
                            out.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                }
                Entry::Array(values) => {
                    out.push(1);
                    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
                    for v in values {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Text(s) => {
                    out.push(2);
                    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let entry = match r.u8()? {
                0 => {
                    let n_layers = r.u32()? as usize;
                    if n_layers == 0 {
                        return Err(Error::Checkpoint(format!("network '{name}' has no layers")));
                    }
                    let mut acts = Vec::with_capacity(n_layers - 1);
                    for _ in 0..n_layers - 1 {
                        let tag = r.u8()?;
                        acts.push(
                            Activation::from_tag(tag)
                                .ok_or_else(|| Error::Checkpoint(format!("unknown activation tag {tag}")))?,
                        );
                    }
                    let mut layers = Vec::with_capacity(n_layers);
                    for _ in 0..n_layers {
                        let out = r.u32()? as usize;
                        let inp = r.u32()? as usize;
                        let weights = r.f64s(out * inp)?;
                        let bias = r.f64s(out)?;
                        layers.push(Dense::new(inp, out, weights, bias)?);
                    }
                    Entry::Network(Mlp::from_layers(layers, acts)?)
                }
                1 => {
                    let n = r.u64()? as usize;
                    Entry::Array(r.f64s(n)?)
                }
                2 => {
                    let n = r.u64()? as usize;
                    Entry::Text(
                        String::from_utf8(r.take(n)?.to_vec())
                            .map_err(|_| Error::Checkpoint("text entry is not UTF-8".into()))?,
                    )
                }
                kind => return Err(Error::Checkpoint(format!("unknown entry kind {kind}"))),
            };
            entries.push((name, entry));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last entry".into()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
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
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
