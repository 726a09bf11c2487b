//! Versioned parameter files: magic, format version, a JSON manifest and
//! little-endian tensor blobs in manifest order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use hetaug_autograd::{ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HAUGCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Model family, e.g. `router` or `seq2seq`.
    pub kind: String,
    pub dtype: String,
    /// Model-specific metadata: config, vocabularies, schema hash, ...
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn save<T: Scalar>(
    path: impl AsRef<Path>,
    kind: &str,
    meta: serde_json::Value,
    params: &ParamStore<T>,
) -> Result<()> {
    let path = path.as_ref();
    let manifest = Manifest {
        kind: kind.to_string(),
        dtype: T::DTYPE.to_string(),
        meta,
        tensors: params
            .iter()
            .map(|(_, name, t)| TensorEntry {
                name: name.to_string(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::with_capacity(json.len() + 4 * params.numel() + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, _, t) in params.iter() {
        for &x in t.data() {
            match T::DTYPE {
                "f32" => buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes()),
                _ => buf.extend_from_slice(&x.as_f64().to_le_bytes()),
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn bad(path: &Path, msg: &str) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

/// Reads a checkpoint; tensors are widened to f64 whatever the stored dtype.
pub fn load(path: impl AsRef<Path>) -> Result<(Manifest, BTreeMap<String, Tensor<f64>>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(path, &format!("unsupported format version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + mlen).ok_or_else(|| bad(path, "truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    let width = match manifest.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(bad(path, &format!("unknown dtype {other}"))),
    };
    let mut off = 20 + mlen;
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let n = e.rows * e.cols;
        let raw = bytes
            .get(off..off + n * width)
            .ok_or_else(|| bad(path, &format!("truncated tensor {}", e.name)))?;
        let data = raw
            .chunks_exact(width)
            .map(|c| match width {
                4 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                _ => f64::from_le_bytes(c.try_into().unwrap()),
            })
            .collect();
        tensors.insert(e.name.clone(), Tensor::from_vec(e.rows, e.cols, data));
        off += n * width;
    }
    if off != bytes.len() {
        return Err(bad(path, "trailing bytes after tensor data"));
    }
    Ok((manifest, tensors))
}

/// Loads stored tensors into a freshly constructed store of matching layout.
pub fn restore<T: Scalar>(
    params: &mut ParamStore<T>,
    tensors: &BTreeMap<String, Tensor<f64>>,
) -> Result<()> {
    let cast: BTreeMap<String, Tensor<T>> = tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
    params.load_named(&cast).map_err(Error::Checkpoint)
}

/// Checks the manifest kind, returning the model metadata.
pub fn expect_kind<'m>(manifest: &'m Manifest, kind: &str) -> Result<&'m serde_json::Value> {
    if manifest.kind != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind} checkpoint, found {}",
            manifest.kind
        )));
    }
    Ok(&manifest.meta)
}
