//! File helpers shared by the dataset, basis, and checkpoint formats.
//!
//! Blob files are concatenations of tensor blobs (see [`Tensor::to_bytes`]).
//! Every blob written through here returns its SHA-256, which the owning
//! manifest records and the reader verifies.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(value).map_err(|e| Error::json("<memory>", e))?;
    s.push(b'\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    let mut bytes = bytes;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

pub fn encode_tensors(tensors: &[&Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        t.write_bytes(&mut out);
    }
    out
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let (t, used) = Tensor::read_bytes(&bytes[pos..])?;
        out.push(t);
        pos += used;
    }
    Ok(out)
}

/// Write tensors to `path`, returning the blob's SHA-256.
pub fn write_tensors(path: &Path, tensors: &[&Tensor]) -> Result<String> {
    let bytes = encode_tensors(tensors);
    write_bytes(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Read tensors from `path`, verifying the SHA-256 when one is given.
pub fn read_tensors(path: &Path, expected_sha: Option<&str>) -> Result<Vec<Tensor>> {
    let bytes = read_bytes(path)?;
    if let Some(want) = expected_sha {
        if sha256_hex(&bytes) != want {
            return Err(Error::HashMismatch {
                path: path.to_path_buf(),
            });
        }
    }
    decode_tensors(&bytes)
}
