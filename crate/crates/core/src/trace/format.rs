//! `kvgauge-trace/1` directory layout.
//!
//! ```text
//! DIR/manifest.json          version, meta, tensor table
//! DIR/<tensor name>.f32      row-major little-endian f32, no header
//! ```
//!
//! Each manifest entry records the tensor's file, shape and the SHA-256 of
//! its payload. Loading checks, per tensor and in this order: presence in
//! the manifest, manifest shape against the metadata, file presence,
//! checksum, then payload length against shape.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{expected_names, expected_shape, KvHeadTrace, LayerTrace, QueryHeadTrace, TraceBundle, TraceMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TRACE_VERSION: &str = "kvgauge-trace/1";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub meta: TraceMeta,
    pub tensors: Vec<TensorEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Writes `bundle` under `dir`, creating it if needed.
pub fn save_trace(bundle: &TraceBundle, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tensors = Vec::new();
    for (name, t) in bundle.named_tensors() {
        let bytes = encode(t);
        let file = format!("{name}.f32");
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(io_err(&path))?;
        tensors.push(TensorEntry {
            sha256: sha256_hex(&bytes),
            name,
            file,
            shape: t.shape().to_vec(),
            dtype: "f32le".into(),
        });
    }
    let manifest = Manifest {
        version: TRACE_VERSION.into(),
        meta: bundle.meta.clone(),
        tensors,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(manifest)
}

fn read_entry(dir: &Path, entry: &TensorEntry, expected: Vec<usize>) -> Result<Tensor> {
    if entry.shape != expected {
        return Err(Error::ShapeMismatch {
            name: entry.name.clone(),
            detail: format!("manifest shape {:?}, metadata implies {:?}", entry.shape, expected),
        });
    }
    if entry.dtype != "f32le" {
        return Err(Error::InvalidTrace(format!(
            "tensor {:?} has unsupported dtype {:?}",
            entry.name, entry.dtype
        )));
    }
    let path: PathBuf = dir.join(&entry.file);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if !sha256_hex(&bytes).eq_ignore_ascii_case(&entry.sha256) {
        return Err(Error::Checksum {
            name: entry.name.clone(),
        });
    }
    let n: usize = entry.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::ShapeMismatch {
            name: entry.name.clone(),
            detail: format!("payload is {} bytes, shape needs {}", bytes.len(), 4 * n),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(entry.shape.clone(), data)
}

/// Loads and fully validates a trace, normalising rotary channels to the
/// interleaved convention.
pub fn load_trace(dir: impl AsRef<Path>) -> Result<TraceBundle> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(Error::MissingFile(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let version = raw.get("version").and_then(|v| v.as_str()).unwrap_or_default();
    if version != TRACE_VERSION {
        return Err(Error::BadVersion {
            found: version.to_string(),
            expected: TRACE_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw)?;
    let meta = manifest.meta.clone();
    meta.validate()?;

    let load = |name: &str| -> Result<Tensor> {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::MissingTensor { name: name.to_string() })?;
        read_entry(dir, entry, expected_shape(&meta, name))
    };

    // Walk the canonical name list so every expected tensor is accounted for.
    let names = expected_names(&meta);
    let mut tensors = names.iter().map(|n| load(n));
    let mut next = || tensors.next().expect("name list matches layout");
    let mut layers = Vec::with_capacity(meta.n_layers);
    for _ in 0..meta.n_layers {
        let hidden = next()?;
        let mut kv_heads = Vec::with_capacity(meta.n_kv_heads);
        for _ in 0..meta.n_kv_heads {
            kv_heads.push(KvHeadTrace {
                keys: next()?,
                values: next()?,
            });
        }
        let mut query_heads = Vec::with_capacity(meta.n_query_heads());
        for _ in 0..meta.n_query_heads() {
            query_heads.push(QueryHeadTrace {
                w_q: next()?,
                prompt_queries: next()?,
                gt_queries: next()?,
                gt_attn: next()?,
            });
        }
        layers.push(LayerTrace {
            hidden,
            kv_heads,
            query_heads,
        });
    }
    let bundle = TraceBundle { meta, layers };
    bundle.validate()?;
    Ok(bundle.normalize_rope())
}
