//! AVMD: a directory holding `manifest.json` and `data.bin`.
//!
//! `data.bin` is the concatenation of little-endian f64 blobs in row-major
//! order. The manifest lists each blob's name, shape, byte offset, byte
//! length and CRC-32, plus free-form JSON metadata. Every offset and length
//! is checked against the size of `data.bin` before any blob is read.

use std::fs;
use std::path::{Path, PathBuf};

use avm_autodiff::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT: &str = "AVMD";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.bin";

#[derive(Debug, Error)]
pub enum AvmdError {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("unsupported container version {found}; this build reads version {supported}")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("container kind is {found:?}, expected {expected:?}")]
    KindMismatch { expected: String, found: String },

    #[error("truncated container: blob {blob:?} needs bytes {start}..{end} but data.bin holds {available}")]
    Truncated {
        blob: String,
        start: u64,
        end: u64,
        available: u64,
    },

    #[error("checksum mismatch in blob {blob:?}: manifest {expected:08x}, data {actual:08x}")]
    ChecksumMismatch { blob: String, expected: u32, actual: u32 },

    #[error("missing blob {0:?}")]
    MissingBlob(String),
}

type Result<T> = std::result::Result<T, AvmdError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub byte_order: String,
    pub layout: String,
    pub blobs: Vec<BlobEntry>,
    pub meta: serde_json::Value,
}

/// In-memory contents of a container.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub blobs: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            blobs: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.blobs.push((name.into(), tensor));
    }

    pub fn blob(&self, name: &str) -> Result<&Tensor> {
        self.blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| AvmdError::MissingBlob(name.to_string()))
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let i = self
            .blobs
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| AvmdError::MissingBlob(name.to_string()))?;
        Ok(self.blobs.remove(i).1)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(AvmdError::KindMismatch {
                expected: kind.to_string(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> AvmdError + '_ {
    move |source| AvmdError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write(dir: &Path, container: &Container) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut data = Vec::new();
    let mut blobs = Vec::with_capacity(container.blobs.len());
    for (name, tensor) in &container.blobs {
        let start = data.len();
        for v in tensor.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
        blobs.push(BlobEntry {
            name: name.clone(),
            dtype: "f64".into(),
            shape: tensor.shape().to_vec(),
            offset: start as u64,
            length: (data.len() - start) as u64,
            crc32: crc32fast::hash(&data[start..]),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        kind: container.kind.clone(),
        byte_order: "little".into(),
        layout: "row-major".into(),
        blobs,
        meta: container.meta.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| AvmdError::Manifest(e.to_string()))?;
    let data_path = dir.join(DATA_FILE);
    fs::write(&data_path, &data).map_err(io(&data_path))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, json).map_err(io(&manifest_path))?;
    Ok(())
}

/// Parses and validates the manifest without reading blob contents.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| AvmdError::Manifest(e.to_string()))?;
    // Version is checked before the full schema so newer layouts report a
    // version error rather than a parse error.
    if value.get("format").and_then(|f| f.as_str()) != Some(FORMAT) {
        return Err(AvmdError::Manifest(format!("format field is not {FORMAT:?}")));
    }
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| AvmdError::Manifest("missing version".into()))?;
    if version != VERSION as u64 {
        return Err(AvmdError::VersionMismatch {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            supported: VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| AvmdError::Manifest(e.to_string()))?;
    if manifest.byte_order != "little" || manifest.layout != "row-major" {
        return Err(AvmdError::Manifest(format!(
            "unsupported encoding {}/{}",
            manifest.byte_order, manifest.layout
        )));
    }
    for b in &manifest.blobs {
        if b.dtype != "f64" {
            return Err(AvmdError::Manifest(format!("blob {:?} has dtype {}", b.name, b.dtype)));
        }
        let numel = b.shape.iter().try_fold(1u64, |acc, &s| acc.checked_mul(s as u64));
        if numel.and_then(|n| n.checked_mul(8)) != Some(b.length) {
            return Err(AvmdError::Manifest(format!(
                "blob {:?} length {} does not match shape {:?}",
                b.name, b.length, b.shape
            )));
        }
    }
    Ok(manifest)
}

pub fn read(dir: &Path) -> Result<Container> {
    let manifest = read_manifest(dir)?;
    let data_path = dir.join(DATA_FILE);
    let available = fs::metadata(&data_path).map_err(io(&data_path))?.len();
    for b in &manifest.blobs {
        let end = b.offset.checked_add(b.length).unwrap_or(u64::MAX);
        if end > available {
            return Err(AvmdError::Truncated {
                blob: b.name.clone(),
                start: b.offset,
                end,
                available,
            });
        }
    }
    let data = fs::read(&data_path).map_err(io(&data_path))?;
    let mut blobs = Vec::with_capacity(manifest.blobs.len());
    for b in manifest.blobs {
        let bytes = &data[b.offset as usize..(b.offset + b.length) as usize];
        let actual = crc32fast::hash(bytes);
        if actual != b.crc32 {
            return Err(AvmdError::ChecksumMismatch {
                blob: b.name,
                expected: b.crc32,
                actual,
            });
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let tensor = Tensor::new(&b.shape, values).map_err(|e| AvmdError::Manifest(e.to_string()))?;
        blobs.push((b.name, tensor));
    }
    Ok(Container {
        kind: manifest.kind,
        meta: manifest.meta,
        blobs,
    })
}
