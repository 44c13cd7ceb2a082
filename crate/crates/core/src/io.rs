//! On-disk formats.
//!
//! A model is a pair of files: `<name>.json`, a manifest listing layers,
//! attributes and tensor locations, and `<name>.bin`, every tensor as raw
//! little-endian `f32` laid end to end in manifest order without padding.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{FeatureShape, LayerId, LayerKind, LayerSpec, NetworkIR};
use crate::tensor::TensorBuf;

pub const MANIFEST_FORMAT: &str = "catprune-model";
pub const MANIFEST_VERSION: u32 = 1;

/// Kinds that express element-wise merges. The pruning method only tracks
/// concatenation, so these are rejected outright.
const ELEMENTWISE_KINDS: [&str; 4] = ["Add", "Sum", "Mul", "Shortcut"];

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    name: String,
    input_shape: FeatureShape,
    blob: String,
    layers: Vec<ManifestLayer>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLayer {
    id: LayerId,
    #[serde(flatten)]
    kind: LayerKind,
    inputs: Vec<LayerId>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: u64,
}

/// Blob path paired with a manifest path.
pub fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

pub fn load_model(manifest_path: impl AsRef<Path>) -> Result<NetworkIR> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", manifest_path.display())))?;
    reject_elementwise(&value)?;
    let manifest: Manifest = serde_json::from_value(value)
        .map_err(|e| Error::Parse(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(Error::Parse(format!(
            "unsupported manifest format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let blob_file = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in manifest.layers {
        let mut layer = LayerSpec::new(entry.id, entry.kind, entry.inputs);
        for (name, t) in entry.tensors {
            let numel: usize = t.shape.iter().product();
            let start = usize::try_from(t.offset)
                .map_err(|_| Error::Parse(format!("layer {}: offset overflow", layer.id)))?;
            let end = start + numel * 4;
            if end > blob.len() {
                return Err(Error::Parse(format!(
                    "layer {} tensor `{name}` ends at byte {end}, blob has {}",
                    layer.id,
                    blob.len()
                )));
            }
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let tensor = TensorBuf::new(t.shape, data)
                .map_err(|e| Error::Parse(format!("layer {} tensor `{name}`: {e}", layer.id)))?;
            layer.weights.insert(name, tensor);
        }
        layers.push(layer);
    }
    let ir = NetworkIR {
        name: manifest.name,
        input_shape: manifest.input_shape,
        layers,
    };
    ir.validate()?;
    Ok(ir)
}

fn reject_elementwise(value: &serde_json::Value) -> Result<()> {
    let Some(layers) = value.get("layers").and_then(|l| l.as_array()) else {
        return Ok(());
    };
    for layer in layers {
        if let Some(kind) = layer.get("kind").and_then(|k| k.as_str()) {
            if ELEMENTWISE_KINDS.contains(&kind) {
                let id = layer.get("id").map(|v| v.to_string()).unwrap_or_else(|| "?".into());
                return Err(Error::UnsupportedTopology(format!(
                    "layer {id} is an element-wise `{kind}`; only concatenation merges are supported"
                )));
            }
        }
    }
    Ok(())
}

pub fn save_model(ir: &NetworkIR, manifest_path: impl AsRef<Path>) -> Result<()> {
    let manifest_path = manifest_path.as_ref();
    let blob_file = blob_path(manifest_path);
    let blob_name = blob_file
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Parse(format!("bad manifest path {}", manifest_path.display())))?
        .to_string();

    let mut blob: Vec<u8> = Vec::new();
    let mut layers = Vec::with_capacity(ir.layers.len());
    for layer in &ir.layers {
        let mut tensors = BTreeMap::new();
        for (name, t) in &layer.weights {
            tensors.insert(
                name.clone(),
                TensorEntry {
                    shape: t.shape().to_vec(),
                    offset: blob.len() as u64,
                },
            );
            blob.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        }
        layers.push(ManifestLayer {
            id: layer.id,
            kind: layer.kind.clone(),
            inputs: layer.inputs.clone(),
            tensors,
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        version: MANIFEST_VERSION,
        name: ir.name.clone(),
        input_shape: ir.input_shape,
        blob: blob_name,
        layers,
    };
    fs::write(&blob_file, &blob).map_err(|e| Error::io(&blob_file, e))?;
    write_json(manifest_path, &manifest)
}

/// A batch of same-shaped tensors stored as `<name>.bin` plus a `<name>.json`
/// sidecar holding `{"shape": [n, c, h, w]}`.
#[derive(Debug, Serialize, Deserialize)]
struct BatchSidecar {
    shape: [usize; 4],
}

pub fn save_tensor_batch(batch: &[TensorBuf], sidecar_path: impl AsRef<Path>) -> Result<()> {
    let sidecar_path = sidecar_path.as_ref();
    let first = batch
        .first()
        .ok_or_else(|| Error::shape(None, "empty tensor batch"))?;
    let [c, h, w] = match first.shape() {
        [c, h, w] => [*c, *h, *w],
        s => return Err(Error::shape(None, format!("batch tensors must be [c, h, w], got {s:?}"))),
    };
    let mut blob = Vec::with_capacity(batch.len() * first.len() * 4);
    for t in batch {
        if t.shape() != first.shape() {
            return Err(Error::shape(None, "tensors in a batch must share a shape"));
        }
        blob.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    let bin = blob_path(sidecar_path);
    fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
    write_json(
        sidecar_path,
        &BatchSidecar {
            shape: [batch.len(), c, h, w],
        },
    )
}

pub fn load_tensor_batch(sidecar_path: impl AsRef<Path>) -> Result<Vec<TensorBuf>> {
    let sidecar_path = sidecar_path.as_ref();
    let sidecar: BatchSidecar = read_json(sidecar_path)?;
    let bin = blob_path(sidecar_path);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let [n, c, h, w] = sidecar.shape;
    let per = c * h * w;
    if bytes.len() != n * per * 4 {
        return Err(Error::Parse(format!(
            "{}: expected {} bytes, found {}",
            bin.display(),
            n * per * 4,
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    values
        .chunks_exact(per.max(1))
        .map(|chunk| TensorBuf::new(vec![c, h, w], chunk.to_vec()))
        .collect()
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Internal(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
