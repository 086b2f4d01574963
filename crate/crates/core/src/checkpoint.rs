//! Binary checkpoints.
//!
//! Layout: `VTCK`, format version (u32 LE), header length (u64 LE), a JSON
//! header, then the payload of f64 LE values. The header carries the
//! parameter manifest, training metadata and the payload's SHA-256.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"VTCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Phase that wrote the checkpoint.
    pub phase: u8,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    /// Completed training stages, e.g. `vta`, `captioner`, `gan`, `joint`.
    pub stages: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    params: Vec<ManifestEntry>,
    payload_bytes: u64,
    payload_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor)>,
}

/// What a load did to the store.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub restored: Vec<String>,
    /// Store parameters absent from the checkpoint, left as initialised.
    pub fresh: Vec<String>,
}

impl Checkpoint {
    /// Snapshot of every parameter whose name starts with one of `prefixes`.
    pub fn from_store(store: &ParamStore, prefixes: &[&str], meta: CheckpointMeta) -> Self {
        let params = store
            .iter()
            .filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre)))
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        Checkpoint { meta, params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut manifest = Vec::with_capacity(self.params.len());
        for (name, t) in &self.params {
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset: payload.len() as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            meta: self.meta.clone(),
            params: manifest,
            payload_bytes: payload.len() as u64,
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Contract(format!("header encoding: {e}")))?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Integrity(m);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(bad("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("unreadable header: {e}")))?;
        let payload = &body[hlen..];
        if payload.len() as u64 != header.payload_bytes {
            return Err(bad(format!(
                "payload holds {} bytes, header promises {}",
                payload.len(),
                header.payload_bytes
            )));
        }
        if hex(&Sha256::digest(payload)) != header.payload_sha256 {
            return Err(bad("payload checksum mismatch".into()));
        }
        let mut params = Vec::with_capacity(header.params.len());
        let mut expected = 0u64;
        for e in header.params {
            if e.dtype != "f64" {
                return Err(bad(format!("parameter {} has unsupported dtype {}", e.name, e.dtype)));
            }
            let n = numel(&e.shape) as u64;
            if e.offset != expected || e.offset + 8 * n > header.payload_bytes {
                return Err(bad(format!("parameter {} has an invalid offset", e.name)));
            }
            let start = e.offset as usize;
            let data = payload[start..start + 8 * n as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            expected = e.offset + 8 * n;
            params.push((e.name, Tensor::new(e.shape, data)?));
        }
        if expected != header.payload_bytes {
            return Err(bad("payload has bytes not covered by the manifest".into()));
        }
        Ok(Checkpoint {
            meta: header.meta,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies every checkpointed value into `store`. Validation happens
    /// before any write, so a failed apply leaves the store untouched.
    pub fn apply(&self, store: &mut ParamStore) -> Result<LoadReport> {
        let mut ids = Vec::with_capacity(self.params.len());
        for (name, t) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Integrity(format!("checkpoint parameter {name} is unknown to the model")))?;
            if store.get(id).value.shape() != t.shape() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("{name}: stored {:?}, model {:?}", t.shape(), store.get(id).value.shape()),
                ));
            }
            ids.push(id);
        }
        for (id, (_, t)) in ids.iter().zip(&self.params) {
            store.get_mut(*id).value = t.clone();
        }
        let restored: Vec<String> = self.params.iter().map(|(n, _)| n.clone()).collect();
        let fresh = store
            .iter()
            .map(|(_, p)| p.name.clone())
            .filter(|n| !restored.contains(n))
            .collect();
        Ok(LoadReport { restored, fresh })
    }
}
