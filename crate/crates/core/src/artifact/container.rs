//! Binary tensor container shared by model and embedding files.
//!
//! ```text
//! ordrec-container\n
//! <manifest byte length, decimal>\n
//! <manifest JSON>\n
//! <tensor blocks, little-endian, in manifest order>
//! <SHA-256 of every preceding byte, 32 bytes>
//! ```
//!
//! The manifest records the format version, a `kind` tag, free-form
//! metadata and, per tensor, its name, dtype, shape and byte offset from
//! the start of the data section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8] = b"ordrec-container\n";
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl TensorData {
    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::U32(_) => "u32",
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(name: &str, shape: &[usize], data: Vec<f32>) -> Self {
        Tensor {
            name: name.into(),
            shape: shape.to_vec(),
            data: TensorData::F32(data),
        }
    }

    pub fn u32(name: &str, shape: &[usize], data: Vec<u32>) -> Self {
        Tensor {
            name: name.into(),
            shape: shape.to_vec(),
            data: TensorData::U32(data),
        }
    }

    /// L2 norm of the values, for inspection output.
    pub fn norm(&self) -> f64 {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt(),
            TensorData::U32(v) => v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<TensorEntry>,
}

/// In-memory form of a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn new(kind: &str, meta: Value) -> Self {
        Container {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, tensor: Tensor) -> Result<()> {
        let expected: usize = tensor.shape.iter().product();
        if expected != tensor.data.len() {
            return Err(Error::shape(format!(
                "tensor {} declares shape {:?} but holds {} values",
                tensor.name,
                tensor.shape,
                tensor.data.len()
            )));
        }
        if self.tensors.iter().any(|t| t.name == tensor.name) {
            return Err(Error::invalid(format!("duplicate tensor {}", tensor.name)));
        }
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let bytes = 4 * t.data.len() as u64;
                let entry = TensorEntry {
                    name: t.name.clone(),
                    dtype: t.data.dtype().into(),
                    shape: t.shape.clone(),
                    offset,
                    bytes,
                };
                offset += bytes;
                entry
            })
            .collect();
        Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest())
            .map_err(|e| Error::invalid(format!("manifest encoding: {e}")))?;
        let data_len: usize = self.tensors.iter().map(|t| 4 * t.data.len()).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 24 + manifest.len() + data_len + CHECKSUM_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(format!("{}\n", manifest.len()).as_bytes());
        out.extend_from_slice(&manifest);
        out.push(b'\n');
        for t in &self.tensors {
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parses and validates a container. The checksum is verified before
    /// anything else is interpreted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let manifest = read_manifest(bytes)?;
        let body_start = manifest_end(bytes)?;
        let data = &bytes[body_start..bytes.len() - CHECKSUM_LEN];

        let mut expected_offset = 0u64;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            let count: usize = entry.shape.iter().product();
            if entry.bytes != 4 * count as u64 || entry.offset != expected_offset {
                return Err(Error::Corrupt(format!("tensor {} has an inconsistent layout", entry.name)));
            }
            let start = entry.offset as usize;
            let end = start + entry.bytes as usize;
            let raw = data
                .get(start..end)
                .ok_or_else(|| Error::Corrupt(format!("tensor {} runs past the data section", entry.name)))?;
            let words = raw.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
            let values = match entry.dtype.as_str() {
                "f32" => TensorData::F32(words.map(f32::from_le_bytes).collect()),
                "u32" => TensorData::U32(words.map(u32::from_le_bytes).collect()),
                other => return Err(Error::Corrupt(format!("unknown dtype {other}"))),
            };
            tensors.push(Tensor {
                name: entry.name.clone(),
                shape: entry.shape.clone(),
                data: values,
            });
            expected_offset += entry.bytes;
        }
        if expected_offset as usize != data.len() {
            return Err(Error::Corrupt("trailing bytes after the last tensor".into()));
        }
        Ok(Container {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Corrupt(format!("missing tensor {name}")))
    }

    /// Moves an `f32` tensor out, checking its shape.
    pub fn take_f32(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        match self.take(name, shape)? {
            TensorData::F32(v) => Ok(v),
            TensorData::U32(_) => Err(Error::Corrupt(format!("tensor {name} should be f32"))),
        }
    }

    pub fn take_u32(&mut self, name: &str, shape: &[usize]) -> Result<Vec<u32>> {
        match self.take(name, shape)? {
            TensorData::U32(v) => Ok(v),
            TensorData::F32(_) => Err(Error::Corrupt(format!("tensor {name} should be u32"))),
        }
    }

    fn take(&mut self, name: &str, shape: &[usize]) -> Result<TensorData> {
        let pos = self
            .tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::Corrupt(format!("missing tensor {name}")))?;
        if self.tensors[pos].shape != shape {
            return Err(Error::shape(format!(
                "tensor {name} has shape {:?}, manifest implies {:?}",
                self.tensors[pos].shape, shape
            )));
        }
        let t = std::mem::replace(&mut self.tensors[pos].data, TensorData::F32(Vec::new()));
        Ok(t)
    }
}

fn verify_checksum(bytes: &[u8]) -> Result<()> {
    if bytes.len() < CHECKSUM_LEN + MAGIC.len() {
        return Err(Error::Checksum);
    }
    let (body, stored) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != stored {
        return Err(Error::Checksum);
    }
    Ok(())
}

/// Byte index where the tensor data section starts.
fn manifest_end(bytes: &[u8]) -> Result<usize> {
    let rest = &bytes[MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Corrupt("missing manifest length".into()))?;
    let len: usize = std::str::from_utf8(&rest[..nl])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Corrupt("bad manifest length".into()))?;
    let start = MAGIC.len() + nl + 1;
    let end = start + len;
    if end + 1 > bytes.len() - CHECKSUM_LEN || bytes[end] != b'\n' {
        return Err(Error::Corrupt("manifest overruns file".into()));
    }
    Ok(end + 1)
}

/// Verifies the checksum and parses only the manifest.
pub fn read_manifest(bytes: &[u8]) -> Result<Manifest> {
    verify_checksum(bytes)?;
    if !bytes.starts_with(MAGIC) {
        return Err(Error::Corrupt("not an ordrec container".into()));
    }
    let end = manifest_end(bytes)?;
    let nl = bytes[MAGIC.len()..].iter().position(|&b| b == b'\n').unwrap_or(0);
    let start = MAGIC.len() + nl + 1;
    let raw: Value = serde_json::from_slice(&bytes[start..end - 1])
        .map_err(|e| Error::Corrupt(format!("manifest: {e}")))?;
    let found = raw
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Corrupt("manifest lacks format_version".into()))?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(Error::Version {
            found: found as u32,
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_value(raw).map_err(|e| Error::Corrupt(format!("manifest: {e}")))
}
