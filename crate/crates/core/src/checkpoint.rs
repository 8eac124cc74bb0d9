//! Model checkpoints: `checkpoint.json` (config plus a manifest of
//! parameter names, kinds, shapes and offsets) next to `checkpoint.bin`, a
//! flat little-endian f32 blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{build_model, Model, ModelConfig};
use crate::params::ParamKind;
use crate::tensor::Tensor;

pub const META_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "checkpoint.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f32 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub parameters: Vec<ManifestEntry>,
}

pub fn encode_f32(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn decode_f32(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint(format!("blob length {} is not a multiple of 4", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect())
}

/// Writes the checkpoint files into `dir`, creating it if needed.
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut parameters = Vec::with_capacity(model.store.len());
    let mut blob = Vec::new();
    let mut offset = 0;
    for e in model.store.entries() {
        parameters.push(ManifestEntry {
            name: e.name.clone(),
            kind: e.kind,
            shape: e.value.shape().to_vec(),
            offset,
        });
        offset += e.value.len();
        blob.extend(encode_f32(e.value.data()));
    }
    let meta = CheckpointMeta {
        config: model.config.clone(),
        parameters,
    };
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

/// Rebuilds the model from its config, then restores every parameter.
/// Names, kinds and shapes must match the architecture exactly.
pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", meta_path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", blob_path.display())))?;
    let values = decode_f32(&blob)?;

    let mut model = build_model(&meta.config, 0)?;
    if meta.parameters.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, architecture has {}",
            meta.parameters.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (id, m) in ids.into_iter().zip(&meta.parameters) {
        let entry = model.store.entry(id);
        if entry.name != m.name || entry.kind != m.kind || entry.value.shape() != m.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "manifest entry {} {:?} does not match parameter {} {:?}",
                m.name,
                m.shape,
                entry.name,
                entry.value.shape()
            )));
        }
        let n = entry.value.len();
        let data = values
            .get(m.offset..m.offset + n)
            .ok_or_else(|| Error::Checkpoint(format!("blob too short for {}", m.name)))?;
        model.store.set(id, Tensor::new(&m.shape, data.to_vec())?);
    }
    Ok(model)
}
