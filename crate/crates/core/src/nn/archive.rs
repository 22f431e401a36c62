//! Single-file checkpoint archive: a magic line, a JSON header and raw little-endian
//! tensor payloads guarded by a SHA-256 digest.
//!
//! ```text
//! <magic>\n
//! u64 LE header length
//! header JSON {"meta": .., "tensors": [{name, dtype, shape, offset, len}], "payload_sha256": ..}
//! payload
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

#[derive(Clone, Debug)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn extend(&mut self, tensors: impl IntoIterator<Item = (String, Tensor)>) {
        self.tensors.extend(tensors);
    }

    pub fn tensor_map(&self) -> HashMap<String, Tensor> {
        self.tensors.iter().cloned().collect()
    }

    /// Tensors whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn to_bytes(&self, magic: &str) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = payload.len();
            let shape = t.dims().to_vec();
            let t = t.flatten_all()?;
            let dtype = match t.dtype() {
                DType::F64 => {
                    for v in t.to_vec1::<f64>()? {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                    "f64"
                }
                DType::U32 => {
                    for v in t.to_vec1::<u32>()? {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                    "u32"
                }
                _ => {
                    for v in t.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                    "f32"
                }
            };
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: dtype.into(),
                shape,
                offset,
                len: payload.len() - offset,
            });
        }
        let header = Header {
            meta: self.meta.clone(),
            tensors: entries,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(magic.len() + 9 + header.len() + payload.len());
        out.extend_from_slice(magic.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Writes atomically: a crash mid-write never leaves a truncated archive at `path`.
    pub fn write(&self, magic: &str, path: &Path) -> Result<()> {
        let bytes = self.to_bytes(magic)?;
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(magic: &str, bytes: &[u8], device: &Device) -> Result<Self> {
        let corrupt = |msg: &str| Error::Checkpoint(msg.to_string());
        let line_end = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("missing magic line"))?;
        let found = std::str::from_utf8(&bytes[..line_end]).unwrap_or("<binary>");
        if found != magic {
            return Err(Error::Checkpoint(format!(
                "version mismatch: expected {magic}, found {found}"
            )));
        }
        let rest = &bytes[line_end + 1..];
        if rest.len() < 8 {
            return Err(corrupt("truncated header length"));
        }
        let header_len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < header_len {
            return Err(corrupt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&rest[..header_len])
            .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
        let payload = &rest[header_len..];
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(corrupt("payload digest mismatch"));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let raw = payload
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| corrupt("tensor extends past payload"))?;
            let numel: usize = e.shape.iter().product();
            let t = match e.dtype.as_str() {
                "f64" => Tensor::from_vec(
                    decode::<8, f64>(raw, numel, f64::from_le_bytes)?,
                    e.shape,
                    device,
                )?,
                "f32" => Tensor::from_vec(
                    decode::<4, f32>(raw, numel, f32::from_le_bytes)?,
                    e.shape,
                    device,
                )?,
                "u32" => Tensor::from_vec(
                    decode::<4, u32>(raw, numel, u32::from_le_bytes)?,
                    e.shape,
                    device,
                )?,
                other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
            };
            tensors.push((e.name, t));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn read(magic: &str, path: &Path, device: &Device) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(magic, &bytes, device)
    }
}

fn decode<const N: usize, T>(raw: &[u8], numel: usize, f: fn([u8; N]) -> T) -> Result<Vec<T>> {
    if raw.len() != numel * N {
        return Err(Error::Checkpoint(
            "tensor byte length does not match shape".into(),
        ));
    }
    Ok(raw
        .chunks_exact(N)
        .map(|c| f(c.try_into().expect("chunk of N bytes")))
        .collect())
}

/// Reads only the magic line, for dispatching on archive kind.
pub fn peek_magic(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .unwrap_or(bytes.len().min(64));
    Ok(String::from_utf8_lossy(&bytes[..end]).into_owned())
}
