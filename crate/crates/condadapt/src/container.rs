//! The `ADPT` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `ADPT` |
//! | 4 | format version (`u32`) |
//! | 8 | metadata length in bytes (`u64`) |
//! | n | metadata, UTF-8 JSON |
//! | rest | concatenated `f32` tensor data |
//!
//! The metadata lists every tensor with its name, shape, byte offset into the
//! data section, byte length and SHA-256 of its bytes, plus a free-form
//! `meta` object owned by the writer.

use std::fs;
use std::io::Write;
use std::path::Path;

use condadapt_core::params::hex;
use condadapt_core::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{ContainerError, Error, Result};

pub const MAGIC: [u8; 4] = *b"ADPT";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: Value,
}

fn digest(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Serializes `params` in name order together with `meta`.
pub fn encode(params: &ParamSet, meta: &Value) -> Vec<u8> {
    let mut blob = Vec::with_capacity(params.numel() * 4);
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let start = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: start as u64,
            length: (blob.len() - start) as u64,
            sha256: digest(&blob[start..]),
        });
    }
    let header = Header {
        tensors,
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + blob.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

/// Parses only the preamble and metadata.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, &[u8]), ContainerError> {
    if bytes.len() < PREAMBLE {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(ContainerError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(ContainerError::Truncated(format!("{} bytes, preamble needs {PREAMBLE}", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(PREAMBLE))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| ContainerError::Truncated(format!("metadata length {len} exceeds file")))?;
    let header: Header =
        serde_json::from_slice(&bytes[PREAMBLE..end]).map_err(|e| ContainerError::Metadata(e.to_string()))?;
    Ok((header, &bytes[end..]))
}

/// Parses and verifies a container.
pub fn decode(bytes: &[u8]) -> Result<(ParamSet, Value), ContainerError> {
    let (header, blob) = decode_header(bytes)?;
    let mut params = ParamSet::new();
    let mut expected_offset = 0u64;
    for e in &header.tensors {
        let numel: usize = e.shape.iter().product();
        if e.offset != expected_offset || e.length != numel as u64 * 4 {
            return Err(ContainerError::Layout(format!(
                "tensor `{}` at offset {} with {} bytes, expected offset {expected_offset} and {} bytes",
                e.name,
                e.offset,
                e.length,
                numel * 4
            )));
        }
        let start = e.offset as usize;
        let end = start + e.length as usize;
        let Some(raw) = blob.get(start..end) else {
            return Err(ContainerError::Truncated(format!("data of tensor `{}`", e.name)));
        };
        if digest(raw) != e.sha256 {
            return Err(ContainerError::HashMismatch { name: e.name.clone() });
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(&e.shape, data).map_err(|err| ContainerError::Layout(err.to_string()))?;
        if params.get(&e.name).is_ok() {
            return Err(ContainerError::Layout(format!("tensor `{}` listed twice", e.name)));
        }
        params.insert(e.name.clone(), tensor);
        expected_offset += e.length;
    }
    if blob.len() as u64 != expected_offset {
        return Err(ContainerError::Layout(format!(
            "{} trailing bytes after the last tensor",
            blob.len() as u64 - expected_offset.min(blob.len() as u64)
        )));
    }
    Ok((params, header.meta))
}

/// Writes `bytes` next to `path` and renames it into place, so readers see
/// either the old file or the complete new one.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::artifact(path, "not a file path"))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_container(path: &Path, params: &ParamSet, meta: &Value) -> Result<()> {
    write_atomic(path, &encode(params, meta))
}

pub fn load_container(path: &Path) -> Result<(ParamSet, Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|source| Error::Corrupt {
        path: path.to_path_buf(),
        source,
    })
}
