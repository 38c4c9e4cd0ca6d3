//! Versioned binary container for named networks.
//!
//! Layout (little endian):
//!
//! ```text
//! b"CPNN"  u32 version  u8 kind  u32 entries
//! entries × { u32 id_len, id utf-8, u32 layers, u32 × layers sizes, u64 n, f64 × n params }
//! u32 crc32 of all preceding bytes
//! ```
//!
//! Identical weights always serialize to identical bytes.

use std::path::Path;

use crate::nn::Mlp;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"CPNN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    PrompterPool = 1,
    EmbedModel = 2,
}

pub fn encode(kind: Kind, entries: &[(&str, &Mlp)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (id, net) in entries {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&(net.sizes().len() as u32).to_le_bytes());
        for s in net.sizes() {
            out.extend_from_slice(&(*s as u32).to_le_bytes());
        }
        out.extend_from_slice(&(net.params().len() as u64).to_le_bytes());
        for p in net.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Corrupt("unexpected end of data".into())),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], expected: Kind) -> Result<Vec<(String, Mlp)>> {
    if bytes.len() < 4 + 4 + 1 + 4 + 4 {
        return Err(Error::Corrupt("container too short".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let kind = r.take(1)?[0];
    if kind != expected as u8 {
        return Err(Error::Corrupt(format!("container holds kind {kind}, expected {}", expected as u8)));
    }
    let count = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let id_len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| Error::Corrupt("entry id is not utf-8".into()))?
            .to_string();
        let layers = r.u32()? as usize;
        let mut sizes = Vec::with_capacity(layers.min(64));
        for _ in 0..layers {
            sizes.push(r.u32()? as usize);
        }
        let n = r.u64()? as usize;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Corrupt("parameter count overflow".into()))?)?;
        let params = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let net = Mlp::from_params(sizes, params).map_err(|e| Error::Corrupt(e.to_string()))?;
        entries.push((id, net));
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt("trailing bytes".into()));
    }
    Ok(entries)
}

pub fn write_file(path: &Path, kind: Kind, entries: &[(&str, &Mlp)]) -> Result<()> {
    std::fs::write(path, encode(kind, entries))?;
    Ok(())
}

pub fn read_file(path: &Path, expected: Kind) -> Result<Vec<(String, Mlp)>> {
    decode(&std::fs::read(path).map_err(crate::error::at(path))?, expected)
}
