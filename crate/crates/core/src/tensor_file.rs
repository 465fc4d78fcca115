//! Binary container shared by dense-model and pruning-model files.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   4 bytes  b"RSTF"
//! version u32      currently 1
//! hlen    u32      byte length of the JSON header
//! header  hlen     UTF-8 JSON, schema owned by the caller
//! body             f32 values, tensors concatenated in header order
//! ```

use std::fs;
use std::io;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub const MAGIC: &[u8; 4] = b"RSTF";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TensorFileError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("malformed tensor file: {0}")]
    Malformed(String),
}

/// Serialise a header and a list of flat tensors.
pub fn encode<H: Serialize>(header: &H, tensors: &[&[f32]]) -> Result<Vec<u8>, TensorFileError> {
    let head = serde_json::to_vec(header)?;
    let body_len: usize = tensors.iter().map(|t| t.len() * 4).sum();
    let mut out = Vec::with_capacity(12 + head.len() + body_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(head.len() as u32).to_le_bytes());
    out.extend_from_slice(&head);
    for t in tensors {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse a header and the trailing f32 body. The caller splits the body
/// according to the shapes recorded in its header.
pub fn decode<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, Vec<f32>), TensorFileError> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(TensorFileError::Malformed("missing magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(TensorFileError::Malformed(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body_start = 12usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| TensorFileError::Malformed("header overruns file".into()))?;
    let header = serde_json::from_slice(&bytes[12..body_start])?;
    let body = &bytes[body_start..];
    if body.len() % 4 != 0 {
        return Err(TensorFileError::Malformed("body is not a whole number of f32".into()));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}

pub fn write<H: Serialize>(path: &Path, header: &H, tensors: &[&[f32]]) -> Result<(), TensorFileError> {
    fs::write(path, encode(header, tensors)?)?;
    Ok(())
}

pub fn read<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f32>), TensorFileError> {
    decode(&fs::read(path)?)
}
