//! Tensor checkpoint files.
//!
//! Layout: an 8-byte little-endian header length, a JSON header table, then
//! the concatenated tensor blobs. Each header entry is
//! `{"name", "dtype", "shape", "byte_offset"}` with `byte_offset` relative to
//! the start of the blob section. Blobs are little-endian f32 regardless of
//! the in-memory f64 representation.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

/// Write named tensors in the given order.
pub fn save(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let mut headers = Vec::with_capacity(entries.len());
    let mut offset = 0u64;
    for (name, t) in entries {
        headers.push(TensorHeader {
            name: name.clone(),
            dtype: "f32".to_string(),
            shape: t.shape().to_vec(),
            byte_offset: offset,
        });
        offset += (t.numel() * 4) as u64;
    }
    let header_json = serde_json::to_vec(&headers)
        .map_err(|e| CoreError::Checkpoint(format!("header encode: {e}")))?;

    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    for (_, t) in entries {
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read every tensor, in header order.
pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)
        .map_err(|_| CoreError::Checkpoint(format!("{}: truncated header length", path.display())))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;

    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)
        .map_err(|_| CoreError::Checkpoint(format!("{}: truncated header", path.display())))?;
    let headers: Vec<TensorHeader> = serde_json::from_slice(&header_json)
        .map_err(|e| CoreError::Checkpoint(format!("{}: header decode: {e}", path.display())))?;

    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;

    let mut out = Vec::with_capacity(headers.len());
    for h in headers {
        if h.dtype != "f32" {
            return Err(CoreError::Checkpoint(format!(
                "{}: unsupported dtype {:?} for {}",
                path.display(),
                h.dtype,
                h.name
            )));
        }
        let numel: usize = h.shape.iter().product();
        let start = h.byte_offset as usize;
        let end = start + numel * 4;
        if end > blob.len() {
            return Err(CoreError::Checkpoint(format!(
                "{}: blob for {} runs past end of file",
                path.display(),
                h.name
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((h.name, Tensor::new(h.shape, data)?));
    }
    Ok(out)
}

/// Load and verify that exactly the expected names are present with the
/// expected shapes.
pub fn load_expected(path: &Path, expected: &[(String, Vec<usize>)]) -> Result<Vec<(String, Tensor)>> {
    let loaded = load(path)?;
    let names: HashSet<&str> = loaded.iter().map(|(n, _)| n.as_str()).collect();
    for (name, shape) in expected {
        let Some((_, t)) = loaded.iter().find(|(n, _)| n == name) else {
            return Err(CoreError::Checkpoint(format!(
                "{}: missing tensor {:?}",
                path.display(),
                name
            )));
        };
        if t.shape() != shape.as_slice() {
            return Err(CoreError::Checkpoint(format!(
                "{}: tensor {:?} has shape {:?}, expected {:?}",
                path.display(),
                name,
                t.shape(),
                shape
            )));
        }
    }
    if names.len() != expected.len() {
        let expected_names: HashSet<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
        let extra: Vec<&&str> = names.difference(&expected_names).collect();
        return Err(CoreError::Checkpoint(format!(
            "{}: unexpected tensors {:?}",
            path.display(),
            extra
        )));
    }
    Ok(loaded)
}
