//! Weight archive: a small binary container for named `f64` tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SKAW"            magic
//! u32                format version
//! u64                header length in bytes
//! header             UTF-8 JSON, see `Header`
//! payload            concatenated f64 values
//! ```
//!
//! Each header entry records a tensor's name, shape, dtype (`"f64"`) and the
//! byte offset of its data relative to the start of the payload.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SKAW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tensors: Vec<Entry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// Serializes `store` with optional string metadata.
pub fn to_bytes(store: &ParamStore, metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for (name, t) in store.iter() {
        tensors.push(Entry { name: name.clone(), shape: t.shape().to_vec(), dtype: "f64".into(), offset });
        offset += 8 * t.numel() as u64;
    }
    let header = serde_json::to_vec(&Header { tensors, metadata: metadata.clone() }).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses an archive, validating the header against the payload.
pub fn from_bytes(bytes: &[u8]) -> Result<(ParamStore, BTreeMap<String, String>)> {
    let corrupt = |m: &str| Error::CorruptHeader(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::FormatVersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let hend = 16u64
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| corrupt("header past end of file"))?;
    let header: Header = serde_json::from_slice(&bytes[16..hend as usize])
        .map_err(|e| Error::CorruptHeader(format!("header json: {e}")))?;
    let payload = &bytes[hend as usize..];
    let mut expected = 0u64;
    let mut store = ParamStore::new();
    for e in &header.tensors {
        if e.dtype != "f64" {
            return Err(Error::CorruptHeader(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        if e.offset != expected {
            return Err(Error::CorruptHeader(format!("{}: offset {} but expected {expected}", e.name, e.offset)));
        }
        let n =
            e.shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d as u64)).ok_or_else(|| corrupt("shape overflow"))?;
        let nbytes = n.checked_mul(8).ok_or_else(|| corrupt("shape overflow"))?;
        let end = expected.checked_add(nbytes).ok_or_else(|| corrupt("offset overflow"))?;
        if end > payload.len() as u64 {
            return Err(Error::CorruptHeader(format!("{}: data runs past end of payload", e.name)));
        }
        let data: Vec<f64> = payload[expected as usize..end as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&e.shape, data).map_err(|err| Error::CorruptHeader(format!("{}: {err}", e.name)))?;
        if store.contains(&e.name) {
            return Err(Error::CorruptHeader(format!("duplicate tensor {}", e.name)));
        }
        store.insert(e.name.clone(), t);
        expected = end;
    }
    if expected != payload.len() as u64 {
        return Err(Error::CorruptHeader(format!("payload is {} bytes, header describes {expected}", payload.len())));
    }
    Ok((store, header.metadata))
}

pub fn save_weights(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    save_weights_with(store, &BTreeMap::new(), path)
}

pub fn save_weights_with(
    store: &ParamStore,
    metadata: &BTreeMap<String, String>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(store, metadata))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ParamStore> {
    Ok(load_weights_with(path)?.0)
}

pub fn load_weights_with(path: impl AsRef<Path>) -> Result<(ParamStore, BTreeMap<String, String>)> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::new(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap());
        s.insert("b.c", Tensor::new(&[3], vec![1e300, -2.0, 0.1]).unwrap());
        s
    }

    #[test]
    fn roundtrip_bits() {
        let s = store();
        let (back, _) = from_bytes(&to_bytes(&s, &BTreeMap::new())).unwrap();
        assert_eq!(back.digest(""), s.digest(""));
    }

    #[test]
    fn truncation_and_version() {
        let bytes = to_bytes(&store(), &BTreeMap::new());
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::CorruptHeader(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(from_bytes(&v2), Err(Error::FormatVersionMismatch { found: 2, expected: 1 })));
    }
}
