//! Weight checkpoint file.
//!
//! Layout: the 8-byte magic `SCCKPT01`, a little-endian `u64` manifest
//! length, the JSON manifest (entry names, shapes, trainable flags and a
//! free-form `meta` object), then every entry's values as little-endian
//! `f64` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Array, ParamStore};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SCCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    entries: Vec<ManifestEntry>,
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(ManifestEntry, Array)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: serde_json::Value) -> Self {
        let entries = store
            .iter()
            .map(|(_, p)| {
                (
                    ManifestEntry {
                        name: p.name.clone(),
                        shape: p.value.shape().to_vec(),
                        trainable: p.trainable,
                    },
                    p.value.clone(),
                )
            })
            .collect();
        Self { entries, meta }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array) {
        self.entries.push((
            ManifestEntry {
                name: name.into(),
                shape: value.shape().to_vec(),
                trainable: false,
            },
            value,
        ));
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(e, _)| e.name == name).map(|(_, a)| a)
    }

    /// Writes every store entry's value from the checkpoint. Entries in the
    /// checkpoint that the store does not know are ignored.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        for p in store.iter_mut() {
            let value = self
                .get(&p.name)
                .ok_or_else(|| Error::Argument(format!("checkpoint lacks parameter `{}`", p.name)))?;
            if value.shape() != p.value.shape() {
                return Err(Error::dim("checkpoint apply", p.value.shape(), value.shape()));
            }
            p.value = value.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            entries: self.entries.iter().map(|(e, _)| e.clone()).collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let n_values: usize = self.entries.iter().map(|(_, a)| a.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * n_values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, a) in &self.entries {
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint header"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let mut cursor = 16 + len;
        let mut entries = Vec::with_capacity(manifest.entries.len());
        for e in manifest.entries {
            let n: usize = e.shape.iter().product();
            let raw = bytes
                .get(cursor..cursor + 8 * n)
                .ok_or_else(|| bad(&format!("truncated values for `{}`", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            cursor += 8 * n;
            let a = Array::new(&e.shape, data).map_err(|err| bad(&err.to_string()))?;
            entries.push((e, a));
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after values"));
        }
        Ok(Self {
            entries,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
