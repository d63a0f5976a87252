//! Self-describing named-tensor container used for model checkpoints and
//! pretrained backbone weights.
//!
//! Layout: an 8-byte magic, a little-endian `u64` header length, a JSON
//! header, then the raw tensor payload. The header carries an arbitrary
//! `meta` document (config snapshot, optimizer bookkeeping, …) plus an index
//! mapping each tensor name to its shape, dtype, and byte offset into the
//! payload, so files remain readable without knowing the writing code.
//! All tensors are stored as little-endian `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, WxError};
use crate::nn::TensorD;

const MAGIC: &[u8; 8] = b"WXTNSR01";

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the payload region (not the file).
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<IndexEntry>,
}

/// A checkpoint loaded into memory: the free-form metadata document and the
/// named tensors in file order.
#[derive(Debug)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, TensorD)>,
    /// SHA-256 of the tensor payload bytes, hex-encoded. Logged on load so
    /// runs record exactly which weights they used.
    pub payload_sha256: String,
}

impl Container {
    /// Looks up a tensor by name.
    pub fn tensor(&self, name: &str) -> Option<&TensorD> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> WxError + '_ {
    move |e| WxError::io(path, e)
}

/// Writes `meta` plus `tensors` to `path` atomically (temp file + rename in
/// the destination directory), returning the payload checksum.
pub fn save(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, TensorD)],
) -> Result<String> {
    let mut index = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        index.push(IndexEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset,
        });
        offset += (t.len() * 8) as u64;
    }
    let header = Header { meta: meta.clone(), tensors: index };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| WxError::Checkpoint { name: path.display().to_string(), reason: e.to_string() })?;

    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tmp = tmp_path(path);
    let mut hasher = Sha256::new();
    {
        let file = File::create(&tmp).map_err(io_err(&tmp))?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC).map_err(io_err(&tmp))?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes()).map_err(io_err(&tmp))?;
        w.write_all(&header_bytes).map_err(io_err(&tmp))?;
        for (_, t) in tensors {
            // Standard layout is guaranteed for owned tensors produced by
            // this crate; iterate in logical order regardless.
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            hasher.update(&buf);
            w.write_all(&buf).map_err(io_err(&tmp))?;
        }
        w.flush().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(hex(&hasher.finalize()))
}

/// Reads a container written by [`save`].
pub fn load(path: &Path) -> Result<Container> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != MAGIC {
        return Err(WxError::Checkpoint {
            name: path.display().to_string(),
            reason: "not a named-tensor container (bad magic)".into(),
        });
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io_err(path))?;
    let mut header_bytes = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header_bytes).map_err(io_err(path))?;
    let header: Header = serde_json::from_slice(&header_bytes).map_err(|e| WxError::Checkpoint {
        name: path.display().to_string(),
        reason: format!("corrupt header: {e}"),
    })?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(io_err(path))?;
    let checksum = hex(&Sha256::digest(&payload));

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        if entry.dtype != "f64" {
            return Err(WxError::Checkpoint {
                name: entry.name.clone(),
                reason: format!("unsupported dtype {}", entry.dtype),
            });
        }
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + count * 8;
        let bytes = payload.get(start..end).ok_or_else(|| WxError::Checkpoint {
            name: entry.name.clone(),
            reason: "tensor data out of bounds".into(),
        })?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = TensorD::from_shape_vec(IxDyn(&entry.shape), data).map_err(|e| {
            WxError::Checkpoint { name: entry.name.clone(), reason: e.to_string() }
        })?;
        tensors.push((entry.name.clone(), t));
    }
    Ok(Container { meta: header.meta, tensors, payload_sha256: checksum })
}

/// Writes a JSON document atomically next to its destination.
pub fn save_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("JSON serialization");
    atomic_write(path, text.as_bytes())
}

/// Writes `bytes` to a sibling temp file and renames it into place, so the
/// destination is never observed half-written.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tmp = tmp_path(path);
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

fn hex(digest: &[u8]) -> String {
    let mut s = String::with_capacity(digest.len() * 2);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
