//! Named parameter storage and the checkpoint archive format.
//!
//! An archive is the magic `FBTA`, a u64 little-endian manifest length, a
//! JSON manifest, then every tensor as a back-to-back FBT1 record. The
//! manifest maps each name to its shape, dtype and byte range, carries the
//! SHA-256 of the tensor payload, and a free-form `meta` object.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::element::{DType, Element};
use crate::fbt::{self, FormatError};
use crate::tensor::Tensor;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"FBTA";

/// Ordered map from unique parameter names to tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    /// Adds a new parameter. Panics on a duplicate name, which is always a
    /// model-construction bug.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        assert!(
            !self.tensors.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.tensors.insert(name, t);
    }

    /// Replaces an existing parameter's value.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Option<Tensor<T>> {
        let slot = self.tensors.get_mut(name)?;
        Some(std::mem::replace(slot, t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn map_values(&self, mut f: impl FnMut(&str, &Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), f(k, v)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
    pub payload_sha256: String,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode_archive<T: Element>(store: &ParamStore<T>, meta: serde_json::Value) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        let offset = payload.len();
        fbt::encode_into(t, &mut payload);
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            offset,
            length: payload.len() - offset,
        });
    }
    let manifest = serde_json::to_vec(&Manifest {
        tensors: entries,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        meta,
    })
    .expect("manifest serializes");
    let mut out = Vec::with_capacity(12 + manifest.len() + payload.len());
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_archive<T: Element>(bytes: &[u8]) -> Result<(ParamStore<T>, Manifest), FormatError> {
    if bytes.len() < 12 {
        return Err(FormatError::Truncated {
            need: 12,
            have: bytes.len(),
        });
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if &magic != ARCHIVE_MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let mut len = [0u8; 8];
    len.copy_from_slice(&bytes[4..12]);
    let mlen = u64::from_le_bytes(len) as usize;
    let payload_start = 12usize
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or(FormatError::Truncated {
            need: 12 + mlen,
            have: bytes.len(),
        })?;
    let manifest: Manifest = serde_json::from_slice(&bytes[12..payload_start])?;
    let payload = &bytes[payload_start..];
    if hex::encode(Sha256::digest(payload)) != manifest.payload_sha256 {
        return Err(FormatError::Invalid("payload checksum mismatch".into()));
    }
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let end = e.offset.checked_add(e.length).filter(|&end| end <= payload.len()).ok_or(
            FormatError::Truncated {
                need: e.offset + e.length,
                have: payload.len(),
            },
        )?;
        let t: Tensor<T> = fbt::decode(&payload[e.offset..end])?;
        if t.shape() != e.shape.as_slice() {
            return Err(FormatError::Invalid(format!(
                "{}: manifest shape {:?}, record shape {:?}",
                e.name,
                e.shape,
                t.shape()
            )));
        }
        if store.contains(&e.name) {
            return Err(FormatError::Invalid(format!("duplicate tensor {}", e.name)));
        }
        store.insert(e.name.clone(), t);
    }
    Ok((store, manifest))
}

pub fn write_archive<T: Element>(
    path: impl AsRef<Path>,
    store: &ParamStore<T>,
    meta: serde_json::Value,
) -> Result<(), FormatError> {
    fs::write(path, encode_archive(store, meta))?;
    Ok(())
}

pub fn read_archive<T: Element>(path: impl AsRef<Path>) -> Result<(ParamStore<T>, Manifest), FormatError> {
    decode_archive(&fs::read(path)?)
}
