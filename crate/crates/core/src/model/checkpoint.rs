//! Versioned binary container for named f32 tensors plus JSON metadata.
//!
//! Layout: 8-byte magic, format version (u32 LE), header length (u64 LE),
//! UTF-8 JSON header, then the raw little-endian payload. The header lists
//! every tensor's name, shape and byte offset and carries a SHA-256 of the
//! payload. Values round-trip bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CGADCKPT";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Shape,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: serde_json::Value,
    tensors: Vec<Entry>,
    payload_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self { metadata, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn push_params(&mut self, prefix: &str, params: &ParamSet<f32>) {
        for (name, t) in params.names().iter().zip(params.tensors()) {
            self.push(format!("{prefix}/{name}"), t.clone());
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    /// All tensors stored under `prefix/`, in insertion order.
    pub fn params(&self, prefix: &str) -> Result<ParamSet<f32>> {
        let lead = format!("{prefix}/");
        let (names, tensors): (Vec<String>, Vec<Tensor<f32>>) = self
            .tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&lead).map(|s| (s.to_owned(), t.clone())))
            .unzip();
        if names.is_empty() {
            return Err(Error::Checkpoint(format!("no parameters under `{prefix}`")));
        }
        ParamSet::from_parts(names, tensors)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                dtype: f32::DTYPE.into(),
                shape: t.shape(),
                offset: payload.len() as u64,
            });
            payload.extend(f32::to_le_bytes_vec(t.data()));
        }
        let header = Header {
            metadata: self.metadata.clone(),
            tensors: entries,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_owned());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {version} (expected {CHECKPOINT_FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let payload = &bytes[header_end..];
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(bad("payload checksum mismatch"));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.dtype != f32::DTYPE {
                return Err(Error::Checkpoint(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            let start = e.offset as usize;
            let end = start + 4 * e.shape.numel();
            let raw = payload.get(start..end).ok_or_else(|| bad("tensor extends past payload"))?;
            tensors.push((e.name, Tensor::from_vec(e.shape, f32::from_le_bytes_slice(raw))?));
        }
        Ok(Self { metadata: header.metadata, tensors })
    }

    /// Writes via a temporary sibling file and rename, so an interrupted
    /// save never leaves a truncated checkpoint behind.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::file(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::file(&tmp, e))?;
        f.sync_all().map_err(|e| Error::file(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Hex SHA-256 of a file's contents.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({"epoch": 3, "kind": "test"}));
        let odd = vec![f32::MIN_POSITIVE, -0.0, 1.0e-42, f32::MAX, 0.1, -3.5];
        c.push("a/w", Tensor::from_vec(Shape::new(1, 2, 3, 1), odd).unwrap());
        c.push("b", Tensor::scalar(7.0));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.metadata, c.metadata);
        for name in ["a/w", "b"] {
            let (x, y) = (c.get(name).unwrap(), back.get(name).unwrap());
            assert_eq!(x.shape(), y.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
        }
    }

    #[test]
    fn rejects_corruption_and_versions() {
        let mut bytes = sample().to_bytes().unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 99;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
    }
}
