//! Checkpoints: a JSON manifest plus one little-endian `f64` blob per
//! parameter, concatenated in manifest order into `params.bin`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CsdmError, Result};
use crate::numcore::{ParamStore, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
pub const FORMAT: &str = "csdm-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub kind: String,
    pub schema_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub params: Vec<ParamEntry>,
    /// Model-specific settings needed to rebuild the model.
    pub extra: serde_json::Value,
}

impl Manifest {
    pub fn for_store(
        kind: &str,
        schema_hash: &str,
        seed: u64,
        epoch: usize,
        store: &ParamStore,
        extra: serde_json::Value,
    ) -> Self {
        Self {
            format: FORMAT.into(),
            kind: kind.into(),
            schema_hash: schema_hash.into(),
            seed,
            epoch,
            params: store
                .params()
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.shape().to_vec(),
                })
                .collect(),
            extra,
        }
    }
}

pub fn save(dir: &Path, manifest: &Manifest, store: &ParamStore) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CsdmError::io(dir, e))?;
    let m = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_vec_pretty(manifest)?;
    json.push(b'\n');
    std::fs::write(&m, json).map_err(|e| CsdmError::io(&m, e))?;
    let b = dir.join(BLOB_FILE);
    std::fs::write(&b, store.to_bytes()).map_err(|e| CsdmError::io(&b, e))?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(Manifest, Vec<Tensor>)> {
    let m = dir.join(MANIFEST_FILE);
    let text = std::fs::read(&m).map_err(|e| CsdmError::io(&m, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    if manifest.format != FORMAT {
        return Err(CsdmError::Format(format!(
            "unknown checkpoint format `{}`",
            manifest.format
        )));
    }
    let b = dir.join(BLOB_FILE);
    let blob = std::fs::read(&b).map_err(|e| CsdmError::io(&b, e))?;
    let expected: usize = manifest
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if blob.len() != expected * 8 {
        return Err(CsdmError::Format(format!(
            "blob has {} bytes, manifest needs {}",
            blob.len(),
            expected * 8
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.params.len());
    let mut chunks = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8")));
    for p in &manifest.params {
        let n = p.shape.iter().product();
        let data: Vec<f64> = chunks.by_ref().take(n).collect();
        tensors.push(Tensor::new(p.shape.clone(), data)?);
    }
    Ok((manifest, tensors))
}

/// Copies loaded tensors into a store with the same layout.
pub fn restore_into(
    store: &mut ParamStore,
    manifest: &Manifest,
    tensors: Vec<Tensor>,
) -> Result<()> {
    if manifest.params.len() != store.len() {
        return Err(CsdmError::Format(format!(
            "checkpoint has {} parameters, model has {}",
            manifest.params.len(),
            store.len()
        )));
    }
    for ((id, entry), t) in store.ids().into_iter().zip(&manifest.params).zip(tensors) {
        let p = store.get_mut(id);
        if p.name != entry.name || p.shape() != entry.shape.as_slice() {
            return Err(CsdmError::Format(format!(
                "checkpoint parameter `{}` {:?} does not match model `{}` {:?}",
                entry.name,
                entry.shape,
                p.name,
                p.shape()
            )));
        }
        p.value = t;
        p.reset_optimizer_state();
        p.zero_grad();
    }
    Ok(())
}
