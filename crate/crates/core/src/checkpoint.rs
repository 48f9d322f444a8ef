//! Checkpoint container: magic `CTTM`, little-endian u32 version, u64 header
//! length, a UTF-8 JSON header (model spec, tensor manifest, optional taboo
//! key, free-form metadata), then the raw little-endian f32 blobs in
//! manifest order. The same container carries model checkpoints and saved
//! adversarial batches.

use crate::error::{Error, Result};
use crate::model::{LayerParams, ModelSpec, Parameters};
use crate::taboo::TabooKey;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CTTM";
const VERSION: u32 = 1;

/// One tensor's entry in the manifest: byte offset into the blob section and
/// element count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub elements: u64,
}

/// JSON header of a container file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<TabooKey>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), detail: e.to_string() }
}

/// Write a container with the given header fields and named tensors.
pub fn write_container(
    path: &Path,
    kind: &str,
    spec: Option<&ModelSpec>,
    key: Option<&TabooKey>,
    meta: serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            elements: t.len() as u64,
        });
        offset += 4 * t.len() as u64;
    }
    let manifest = Manifest {
        kind: kind.to_string(),
        spec: spec.cloned(),
        key: key.cloned(),
        tensors: entries,
        meta,
    };
    let header = serde_json::to_vec(&manifest)
        .map_err(|e| Error::CheckpointFormat(format!("header encode: {e}")))?;

    let mut f = File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    f.write_all(&VERSION.to_le_bytes()).map_err(|e| io_err(path, e))?;
    f.write_all(&(header.len() as u64).to_le_bytes()).map_err(|e| io_err(path, e))?;
    f.write_all(&header).map_err(|e| io_err(path, e))?;
    let mut blob = Vec::with_capacity(offset as usize);
    for (_, t) in tensors {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    f.write_all(&blob).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Read a container back: the manifest plus tensors in manifest order.
pub fn read_container(path: &Path) -> Result<(Manifest, Vec<Tensor>)> {
    let mut f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(Error::CheckpointFormat(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut version = [0u8; 4];
    f.read_exact(&mut version).map_err(|e| io_err(path, e))?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let mut header_len = [0u8; 8];
    f.read_exact(&mut header_len).map_err(|e| io_err(path, e))?;
    let header_len = u64::from_le_bytes(header_len) as usize;
    let mut header = vec![0u8; header_len];
    f.read_exact(&mut header).map_err(|e| {
        Error::CheckpointFormat(format!("header truncated ({header_len} bytes claimed): {e}"))
    })?;
    let manifest: Manifest = serde_json::from_slice(&header)
        .map_err(|e| Error::CheckpointFormat(format!("header decode: {e}")))?;

    let mut blob = Vec::new();
    f.read_to_end(&mut blob).map_err(|e| io_err(path, e))?;

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let start = entry.offset as usize;
        let bytes = 4 * entry.elements as usize;
        let declared: usize = entry.shape.iter().product();
        if declared != entry.elements as usize {
            return Err(Error::CheckpointFormat(format!(
                "tensor '{}': shape {:?} disagrees with element count {}",
                entry.name, entry.shape, entry.elements
            )));
        }
        if start + bytes > blob.len() {
            return Err(Error::Truncated { expected: start + bytes, got: blob.len() });
        }
        let data: Vec<f32> = blob[start..start + bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor::from_vec(entry.shape.clone(), data)?);
    }
    Ok((manifest, tensors))
}

/// Save a model checkpoint: spec, per-layer weights/biases, optional key.
pub fn save_model(
    path: &Path,
    spec: &ModelSpec,
    params: &Parameters,
    key: Option<&TabooKey>,
) -> Result<()> {
    let mut named: Vec<(String, &Tensor)> = Vec::new();
    for (idx, layer) in params.layers.iter().enumerate() {
        if let Some(p) = layer {
            named.push((format!("layer{idx}.weights"), &p.weights));
            named.push((format!("layer{idx}.bias"), &p.bias));
        }
    }
    let meta = serde_json::json!({ "init_seed": params.seed });
    write_container(path, "model", Some(spec), key, meta, &named)
}

/// Load a model checkpoint saved by [`save_model`].
pub fn load_model(path: &Path) -> Result<(ModelSpec, Parameters, Option<TabooKey>)> {
    let (manifest, tensors) = read_container(path)?;
    if manifest.kind != "model" {
        return Err(Error::CheckpointFormat(format!(
            "expected a model checkpoint, found kind '{}'",
            manifest.kind
        )));
    }
    let spec = manifest
        .spec
        .ok_or_else(|| Error::CheckpointFormat("model checkpoint missing spec".into()))?;
    let seed = manifest
        .meta
        .get("init_seed")
        .and_then(|v| v.as_u64())
        .unwrap_or(0);
    let mut layers: Vec<Option<LayerParams>> = vec![None; spec.num_layers()];
    let by_name: std::collections::HashMap<&str, usize> = manifest
        .tensors
        .iter()
        .enumerate()
        .map(|(i, e)| (e.name.as_str(), i))
        .collect();
    for idx in 0..spec.num_layers() {
        let wname = format!("layer{idx}.weights");
        let bname = format!("layer{idx}.bias");
        match (by_name.get(wname.as_str()), by_name.get(bname.as_str())) {
            (Some(&wi), Some(&bi)) => {
                layers[idx] = Some(LayerParams {
                    weights: tensors[wi].clone(),
                    bias: tensors[bi].clone(),
                });
            }
            (None, None) => {}
            _ => {
                return Err(Error::CheckpointFormat(format!(
                    "layer {idx}: weights/bias pair incomplete"
                )))
            }
        }
    }
    let params = Parameters { layers, seed };
    if let Some(key) = &manifest.key {
        key.validate(&spec)?;
    }
    Ok((spec, params, manifest.key))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taboo::generate_key;

    #[test]
    fn model_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ctt");
        let spec = ModelSpec::tiny();
        let params = Parameters::init(&spec, 42).unwrap();
        let key = generate_key(&spec, 0.3, 1e-4, 7).unwrap();
        save_model(&path, &spec, &params, Some(&key)).unwrap();
        let (spec2, params2, key2) = load_model(&path).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(params, params2);
        assert_eq!(Some(key), key2);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ctt");
        let spec = ModelSpec::tiny();
        let params = Parameters::init(&spec, 1).unwrap();
        save_model(&path, &spec, &params, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::CheckpointFormat(_))));
    }

    #[test]
    fn truncated_blob_reports_lengths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ctt");
        let spec = ModelSpec::tiny();
        let params = Parameters::init(&spec, 1).unwrap();
        save_model(&path, &spec, &params, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        match load_model(&path) {
            Err(Error::Truncated { expected, got }) => assert!(expected > got),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ctt");
        let spec = ModelSpec::tiny();
        let params = Parameters::init(&spec, 1).unwrap();
        save_model(&path, &spec, &params, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::CheckpointFormat(_))));
    }
}
