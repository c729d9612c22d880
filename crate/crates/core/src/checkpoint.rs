//! Versioned binary checkpoints for parameter stores.
//!
//! Layout (little endian):
//! `MANGOCKP` | version u32 | header length u32 | header JSON bytes |
//! parameter count u32 | per parameter: name length u32, name bytes,
//! rank u32, extents u64 each, values, moment1, moment2 (f64 each),
//! step count u64, gradient flag u8 and gradient values when set.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{ParamStore, Parameter, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MANGOCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub store: ParamStore,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_values(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(header: &serde_json::Value, store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let h = serde_json::to_vec(header)?;
    put_u32(&mut out, h.len() as u32);
    out.extend_from_slice(&h);
    put_u32(&mut out, store.len() as u32);
    for p in store.iter() {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.shape().len() as u32);
        for &d in p.shape() {
            put_u64(&mut out, d as u64);
        }
        put_values(&mut out, &p.tensor);
        put_values(&mut out, &p.moment1);
        put_values(&mut out, &p.moment2);
        put_u64(&mut out, p.step_count);
        match &p.grad {
            Some(g) => {
                out.push(1);
                put_values(&mut out, g);
            }
            None => out.push(0),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hl = r.u32()? as usize;
    let header: serde_json::Value = serde_json::from_slice(r.take(hl)?)?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nl = r.u32()? as usize;
        let name = String::from_utf8(r.take(nl)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let tensor = r.tensor(&shape)?;
        let moment1 = r.tensor(&shape)?;
        let moment2 = r.tensor(&shape)?;
        let step_count = r.u64()?;
        let grad = match r.take(1)?[0] {
            0 => None,
            1 => Some(r.tensor(&shape)?),
            f => return Err(Error::Checkpoint(format!("bad gradient flag {f}"))),
        };
        let idx = store.register(name, tensor)?;
        let p: &mut Parameter = store.get_mut(idx);
        p.moment1 = moment1;
        p.moment2 = moment2;
        p.step_count = step_count;
        p.grad = grad;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { header, store })
}

pub fn save(path: &Path, header: &serde_json::Value, store: &ParamStore) -> Result<String> {
    let bytes = encode(header, store)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
