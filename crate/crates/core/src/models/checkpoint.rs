use std::fs;
use std::path::{Path, PathBuf};

use dyhgn_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{assemble, GraphContext, Model, ModelConfig};
use crate::data::SplitPolicy;
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::schema::DatasetKind;

pub const WEIGHTS_FILE: &str = "model.bin";
pub const MANIFEST_FILE: &str = "model.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the weights file, in f64 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: String,
    pub dataset: DatasetKind,
    pub config: ModelConfig,
    pub split_policy: SplitPolicy,
    pub split_seed: u64,
    pub entries: Vec<CheckpointEntry>,
}

/// Parameters as little-endian f64 plus a JSON manifest of names and shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub values: Vec<Tensor>,
}

impl Checkpoint {
    /// Rebuilds the model on `ctx` and loads the stored parameters.
    pub fn restore(&self, ctx: &GraphContext) -> Result<Box<dyn Model>> {
        let mut model = assemble(ctx, &self.manifest.config)?;
        let names: Vec<String> = self.manifest.entries.iter().map(|e| e.name.clone()).collect();
        model.params_mut().load(&names, self.values.clone())?;
        Ok(model)
    }
}

fn paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(WEIGHTS_FILE), dir.join(MANIFEST_FILE))
}

pub fn save_checkpoint(
    dir: &Path,
    model: &dyn Model,
    dataset: DatasetKind,
    config: &ModelConfig,
    split_policy: SplitPolicy,
    split_seed: u64,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (weights, manifest_path) = paths(dir);
    let store = model.params();
    let mut bytes = Vec::with_capacity(store.n_scalars() * 8);
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (name, value) in store.names().iter().zip(store.values()) {
        entries.push(CheckpointEntry {
            name: name.clone(),
            shape: value.shape().to_vec(),
            offset,
        });
        offset += value.numel();
        for x in value.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(&weights, bytes).map_err(|e| Error::io(&weights, e))?;
    let manifest = CheckpointManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        dataset,
        config: config.clone(),
        split_policy,
        split_seed,
        entries,
    };
    write_json(&manifest_path, &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let (weights, manifest_path) = paths(dir);
    let manifest: CheckpointManifest = read_json(&manifest_path)?;
    let bytes = fs::read(&weights).map_err(|e| Error::io(&weights, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::ParamTable(format!("{} is not a whole number of f64 values", weights.display())));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8 bytes")))
        .collect();
    let mut values = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let len: usize = e.shape.iter().product();
        let data = flat.get(e.offset..e.offset + len).ok_or_else(|| {
            Error::ParamTable(format!("parameter `{}` runs past the end of the weights file", e.name))
        })?;
        values.push(Tensor::from_vec(e.shape.clone(), data.to_vec())?);
    }
    Ok(Checkpoint { manifest, values })
}
