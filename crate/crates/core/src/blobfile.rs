//! Container format shared by checkpoint and geometry files.
//!
//! Layout: an 8-byte little-endian header length `N`, then `N` bytes of JSON,
//! then the tensor payload as little-endian `f64`. The header carries a
//! `tensors` array of `{name, shape, offset, length}` where `offset` and
//! `length` are byte counts relative to the start of the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

pub struct Tensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// Writes `meta` (a JSON object) extended with the `tensors` table.
pub fn write(path: &Path, mut meta: Value, tensors: &[Tensor<'_>]) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for t in tensors {
        let expected: usize = t.shape.iter().product();
        if expected != t.data.len() {
            return Err(Error::DimensionMismatch {
                expected,
                found: t.data.len(),
            });
        }
        let length = t.data.len() * 8;
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
            length,
        });
        offset += length;
    }
    let obj = meta
        .as_object_mut()
        .ok_or_else(|| Error::Format("blob header must be a JSON object".into()))?;
    obj.insert("tensors".into(), serde_json::to_value(&entries)?);
    let header = serde_json::to_vec(&meta)?;

    let mut buf = Vec::with_capacity(8 + header.len() + offset);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in tensors {
        for x in t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub struct Loaded {
    pub meta: Value,
    pub tensors: Vec<(TensorEntry, Vec<f64>)>,
}

impl Loaded {
    pub fn take(&mut self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let pos = self
            .tensors
            .iter()
            .position(|(e, _)| e.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        let (e, d) = self.tensors.swap_remove(pos);
        Ok((e.shape, d))
    }
}

pub fn read(path: &Path) -> Result<Loaded> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let payload_start = 8usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length out of range"))?;
    let mut meta: Value = serde_json::from_slice(&bytes[8..payload_start])?;
    let entries: Vec<TensorEntry> = serde_json::from_value(
        meta.as_object_mut()
            .and_then(|o| o.remove("tensors"))
            .ok_or_else(|| bad("no tensor table"))?,
    )?;
    let payload = &bytes[payload_start..];
    let mut tensors = Vec::with_capacity(entries.len());
    for e in entries {
        let end = e.offset.checked_add(e.length).ok_or_else(|| bad("bad offset"))?;
        if end > payload.len() || e.length % 8 != 0 {
            return Err(bad("tensor extends past end of file"));
        }
        if e.shape.iter().product::<usize>() * 8 != e.length {
            return Err(bad("tensor shape does not match its byte length"));
        }
        let data = payload[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((e, data));
    }
    Ok(Loaded { meta, tensors })
}
