//! Two-part container shared by descriptor bundles and checkpoints.
//!
//! Layout: 4-byte magic, `u32` little-endian manifest length, the UTF-8 JSON
//! manifest, then the little-endian `f32` payloads of every array in manifest
//! order. Array offsets are relative to the first payload byte.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            shape: t.dims().to_vec(),
            data: t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
        })
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, self.shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// The manifest fields every reader checks before anything else.
#[derive(Debug, Deserialize)]
struct Preamble {
    format: String,
    version: u32,
}

pub fn array_table(arrays: &[NamedArray]) -> Vec<ArrayEntry> {
    let mut offset = 0u64;
    arrays
        .iter()
        .map(|a| {
            let e = ArrayEntry {
                name: a.name.clone(),
                dtype: "f32".into(),
                shape: a.shape.clone(),
                offset,
            };
            offset += 4 * a.data.len() as u64;
            e
        })
        .collect()
}

pub fn encode<M: Serialize>(magic: &[u8; 4], manifest: &M, arrays: &[NamedArray]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec_pretty(manifest)?;
    let payload: usize = arrays.iter().map(|a| a.data.len() * 4).sum();
    let mut out = Vec::with_capacity(8 + json.len() + payload);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for a in arrays {
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits a container into its manifest and payload after checking the magic,
/// format name and version.
pub fn split<'a>(bytes: &'a [u8], magic: &[u8; 4], format: &str, version: u32) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 8 || &bytes[..4] != magic {
        return Err(Error::Format(format!("missing {format} header")));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let manifest = bytes
        .get(8..8 + len)
        .ok_or_else(|| Error::Format("manifest runs past end of file".into()))?;
    let pre: Preamble = serde_json::from_slice(manifest)?;
    if pre.format != format {
        return Err(Error::Format(format!("expected {format}, found {}", pre.format)));
    }
    if pre.version != version {
        return Err(Error::Version {
            found: pre.version,
            expected: version,
        });
    }
    Ok((manifest, &bytes[8 + len..]))
}

pub fn decode_arrays(payload: &[u8], table: &[ArrayEntry]) -> Result<Vec<NamedArray>> {
    let mut expected = 0u64;
    let mut out = Vec::with_capacity(table.len());
    for e in table {
        if e.dtype != "f32" {
            return Err(Error::Format(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        if e.offset != expected {
            return Err(Error::Format(format!("{}: payloads out of manifest order", e.name)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let bytes = payload
            .get(start..start + 4 * n)
            .ok_or_else(|| Error::Format(format!("{}: payload truncated", e.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(NamedArray {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data,
        });
        expected += 4 * n as u64;
    }
    if expected as usize != payload.len() {
        return Err(Error::Format("trailing bytes after last array".into()));
    }
    Ok(out)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
