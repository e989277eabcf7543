//! `manifest.json` + raw little-endian f32 array files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_NAME: &str = "zsattr-fixture";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub byte_order: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default = "default_format")]
    pub format: String,
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<serde_json::Value>,
    pub entries: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

fn default_format() -> String {
    FORMAT_NAME.to_string()
}

fn default_version() -> u32 {
    FORMAT_VERSION
}

/// Named arrays in manifest order, plus free-form dims and metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArrayBundle {
    pub dims: Option<serde_json::Value>,
    pub arrays: Vec<(String, Tensor)>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

fn file_name_for(index: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{index:05}_{clean}.f32")
}

impl ArrayBundle {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.push((name.into(), t));
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (i, (name, t)) in self.arrays.iter().enumerate() {
            let file = file_name_for(i, name);
            let mut bytes = Vec::with_capacity(t.len() * 4);
            for &v in t.data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            entries.push(ManifestEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                file,
                byte_order: "little".into(),
            });
        }
        let manifest = Manifest {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            dims: self.dims.clone(),
            entries,
            metadata: self.metadata.clone(),
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Fixture {
                array: MANIFEST_FILE.into(),
                reason: format!("unsupported version {}", manifest.version),
            });
        }
        let mut arrays = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            arrays.push((entry.name.clone(), read_entry(dir, entry)?));
        }
        Ok(Self {
            dims: manifest.dims,
            arrays,
            metadata: manifest.metadata,
        })
    }
}

fn read_entry(dir: &Path, entry: &ManifestEntry) -> Result<Tensor> {
    let fail = |reason: String| Error::Fixture {
        array: entry.name.clone(),
        reason,
    };
    if entry.dtype != "f32" {
        return Err(fail(format!("unsupported dtype `{}`", entry.dtype)));
    }
    if entry.byte_order != "little" {
        return Err(fail(format!("unsupported byte order `{}`", entry.byte_order)));
    }
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| fail(format!("cannot read {}: {e}", path.display())))?;
    let expected: usize = entry.shape.iter().product();
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(fail(format!(
            "shape {:?} needs {expected} floats, file holds {} bytes",
            entry.shape,
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(expected);
    for (k, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(fail(format!("non-finite value at flat index {k}")));
        }
        data.push(f64::from(v));
    }
    Tensor::new(entry.shape.clone(), data).map_err(|e| fail(e.to_string()))
}
