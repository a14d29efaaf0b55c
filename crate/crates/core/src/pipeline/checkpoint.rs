//! Binary checkpoints: an 8-byte magic, a little-endian `u32` format
//! version, a `u64` manifest length, the JSON manifest, then every
//! parameter as little-endian `f64` in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"VISAWCKP";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub module: String,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
    pub config: Value,
    #[serde(default)]
    pub metadata: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(module: &str, seed: u64, config: Value) -> Self {
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                module: module.to_string(),
                seed,
                params: Vec::new(),
                config,
                metadata: BTreeMap::new(),
            },
            tensors: Vec::new(),
        }
    }

    /// Adds every parameter of `store` in registration order.
    pub fn with_store(mut self, store: &ParamStore) -> Self {
        for (name, value) in store.named() {
            self.push(name, value.clone());
        }
        self
    }

    pub fn push(&mut self, name: &str, value: Tensor) {
        let offset = self.manifest.params.last().map_or(0, |p| {
            p.offset + 8 * p.shape.iter().product::<usize>() as u64
        });
        self.manifest.params.push(ParamEntry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            offset,
        });
        self.tensors.push(value);
    }

    pub fn with_metadata(mut self, key: &str, value: impl Serialize) -> Result<Self> {
        self.manifest
            .metadata
            .insert(key.to_string(), serde_json::to_value(value)?);
        Ok(self)
    }

    pub fn metadata<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .manifest
            .metadata
            .get(key)
            .ok_or_else(|| Error::Integrity(format!("checkpoint metadata lacks {key}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn config<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.manifest.config.clone())?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.manifest
            .params
            .iter()
            .position(|p| p.name == name)
            .map(|i| &self.tensors[i])
    }

    pub fn expect_module(&self, module: &str) -> Result<()> {
        if self.manifest.module != module {
            return Err(Error::Integrity(format!(
                "checkpoint holds module {}, expected {module}",
                self.manifest.module
            )));
        }
        Ok(())
    }

    /// Copies every stored tensor into the same-named parameter of `store`.
    /// Names and shapes must match exactly in both directions.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.manifest.params.len() != store.len() {
            return Err(Error::Integrity(format!(
                "checkpoint has {} parameters, model has {}",
                self.manifest.params.len(),
                store.len()
            )));
        }
        for (entry, value) in self.manifest.params.iter().zip(&self.tensors) {
            let id = store
                .id(&entry.name)
                .ok_or_else(|| Error::Integrity(format!("unknown parameter {}", entry.name)))?;
            if store.value(id).shape() != value.shape() {
                return Err(Error::Integrity(format!(
                    "parameter {} has shape {:?} in checkpoint but {:?} in model",
                    entry.name,
                    value.shape(),
                    store.value(id).shape()
                )));
            }
            store.set(id, value.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let scalars: usize = self.tensors.iter().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + 8 * scalars);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() < mlen {
            return Err(Error::Integrity("truncated manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..mlen])
            .map_err(|e| Error::Integrity(format!("bad manifest: {e}")))?;
        if manifest.format_version != version {
            return Err(Error::Version {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let payload = &body[mlen..];
        let mut expected = 0u64;
        for p in &manifest.params {
            if p.offset != expected {
                return Err(Error::Integrity(format!(
                    "parameter {} at offset {}, expected {expected}",
                    p.name, p.offset
                )));
            }
            expected += 8 * p.shape.iter().product::<usize>() as u64;
        }
        if payload.len() as u64 != expected {
            return Err(Error::Integrity(format!(
                "payload has {} bytes, manifest describes {expected}",
                payload.len()
            )));
        }
        let tensors = manifest
            .params
            .iter()
            .map(|p| {
                let n: usize = p.shape.iter().product();
                let start = p.offset as usize;
                let data = payload[start..start + 8 * n]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::new(p.shape.clone(), data)
                    .map_err(|e| Error::Integrity(format!("parameter {}: {e}", p.name)))
            })
            .collect::<Result<_>>()?;
        Ok(Self { manifest, tensors })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, checkpoint.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
