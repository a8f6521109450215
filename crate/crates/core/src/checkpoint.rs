//! Model checkpoints on top of the tensor file format.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::json;

use crate::error::{Error, Result};
use crate::model::{FeatureGrid, Model, ModelConfig};
use crate::tensorfile::TensorFile;

pub const CHECKPOINT_KIND: &str = "mres-checkpoint";
pub const FEATURES_KIND: &str = "mres-features";

pub fn to_tensor_file(model: &Model, extra: serde_json::Value) -> TensorFile {
    let tensors = model.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
    TensorFile { metadata: json!({"kind": CHECKPOINT_KIND, "config": model.cfg, "extra": extra}), tensors }
}

pub fn save(model: &Model, path: &Path, extra: serde_json::Value) -> Result<()> {
    to_tensor_file(model, extra).save(path)
}

/// Differences between the model's parameter manifest and a file's, one per line.
pub fn manifest_diff(model: &Model, file: &TensorFile) -> Vec<String> {
    let want: BTreeMap<&str, &[usize]> = model.store.iter().map(|(_, p)| (p.name.as_str(), p.value.shape())).collect();
    let have: BTreeMap<&str, &[usize]> = file.tensors.iter().map(|(n, t)| (n.as_str(), t.shape())).collect();
    let mut diff = Vec::new();
    for (name, shape) in &want {
        match have.get(name) {
            None => diff.push(format!("missing from checkpoint: {name} {shape:?}")),
            Some(s) if s != shape => diff.push(format!("shape mismatch: {name} model {shape:?} checkpoint {s:?}")),
            Some(_) => {}
        }
    }
    for (name, shape) in &have {
        if !want.contains_key(name) {
            diff.push(format!("unexpected in checkpoint: {name} {shape:?}"));
        }
    }
    if have.len() != file.tensors.len() {
        diff.push("checkpoint lists a tensor name more than once".into());
    }
    diff
}

/// Copies the file's tensors into `model` after validating every name and shape.
pub fn load_into(model: &mut Model, file: &TensorFile) -> Result<()> {
    let diff = manifest_diff(model, file);
    if !diff.is_empty() {
        return Err(Error::Manifest(diff.join("\n")));
    }
    for (name, t) in &file.tensors {
        let id = model.store.id(name)?;
        *model.store.value_mut(id) = t.clone();
    }
    Ok(())
}

pub fn config_of(file: &TensorFile) -> Result<ModelConfig> {
    if file.metadata.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
        return Err(Error::Format("file is not a model checkpoint".into()));
    }
    let cfg = file.metadata.get("config").cloned().ok_or_else(|| Error::Format("checkpoint has no model configuration".into()))?;
    serde_json::from_value(cfg).map_err(|e| Error::Format(format!("model configuration: {e}")))
}

/// Builds the model described by the checkpoint and loads its parameters.
pub fn load(path: &Path) -> Result<Model> {
    let file = TensorFile::load(path)?;
    let mut model = Model::new(config_of(&file)?, 0)?;
    load_into(&mut model, &file)?;
    Ok(model)
}

/// Feature maps, one `D × H × W` tensor per modality named `features.<modality>`.
pub fn features_file(grids: &[FeatureGrid], extra: serde_json::Value) -> TensorFile {
    let shapes: Vec<_> = grids
        .iter()
        .map(|g| json!({"modality": g.modality, "gsd_target": g.gsd_target, "shape": g.data.shape()}))
        .collect();
    TensorFile {
        metadata: json!({"kind": FEATURES_KIND, "grids": shapes, "extra": extra}),
        tensors: grids.iter().map(|g| (format!("features.{}", g.modality), g.data.clone())).collect(),
    }
}
