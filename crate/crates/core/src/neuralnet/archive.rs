use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{InputNorm, Model};
use super::{NetworkConfig, TensorSpec};
use crate::error::{Error, Result};
use crate::signal_io::{read_f32le, write_f32le};

pub const ENSEMBLE_MANIFEST: &str = "ensemble.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    config: NetworkConfig,
    norm: InputNorm,
    params_file: String,
    tensors: Vec<TensorSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleManifest {
    members: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes `<name>.model.json` and `<name>.params.f32le` into `dir`.
pub fn save_model(dir: &Path, name: &str, model: &Model) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params_file = format!("{name}.params.f32le");
    let values: Vec<f32> = model.params.values.iter().map(|&v| v as f32).collect();
    write_f32le(&dir.join(&params_file), &values)?;
    let manifest = ModelManifest {
        config: model.config.clone(),
        norm: model.norm.clone(),
        params_file,
        tensors: model.params.layout.tensors.clone(),
    };
    let path = dir.join(format!("{name}.model.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let manifest: ModelManifest = read_json(path)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let values: Vec<f64> = read_f32le(&dir.join(&manifest.params_file))?
        .into_iter()
        .map(f64::from)
        .collect();
    let model = Model::from_parts(manifest.config, manifest.norm, values)?;
    if model.params.layout.tensors != manifest.tensors {
        return Err(Error::ShapeMismatch(format!("{}: tensor table does not match config", path.display())));
    }
    Ok(model)
}

/// Saves each member as `memberNN` and writes the ensemble manifest.
pub fn save_ensemble(dir: &Path, models: &[Model]) -> Result<PathBuf> {
    let mut members = Vec::new();
    for (i, m) in models.iter().enumerate() {
        let path = save_model(dir, &format!("member{i:02}"), m)?;
        members.push(path.file_name().expect("file name").to_string_lossy().into_owned());
    }
    let path = dir.join(ENSEMBLE_MANIFEST);
    write_json(&path, &EnsembleManifest { members })?;
    Ok(path)
}

pub fn load_ensemble(path: &Path) -> Result<Vec<Model>> {
    let manifest: EnsembleManifest = read_json(path)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if manifest.members.is_empty() {
        return Err(Error::InvalidConfig(format!("{}: ensemble has no members", path.display())));
    }
    manifest.members.iter().map(|m| load_model(&dir.join(m))).collect()
}
