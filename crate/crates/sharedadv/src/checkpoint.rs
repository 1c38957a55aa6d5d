//! Model checkpoints: one TNSR1 file per parameter tensor plus a JSON
//! manifest holding the resolved configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sharedadv_core::net::{Classifier, ModelParams};

use crate::config::{Config, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor_io::{load_tensor, save_tensor};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "sharedadv-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config_hash: String,
    /// Resolved configuration text the model was trained with.
    pub config: String,
    pub model: ModelConfig,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub params: Vec<ParamEntry>,
}

/// Write `model` to `dir`. Files are staged in a sibling directory and
/// renamed into place, so a failure never leaves a partial checkpoint.
pub fn save_checkpoint(dir: &Path, model: &Classifier, config: &Config) -> Result<()> {
    let staging = staging_path(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(Error::io(&staging))?;
    }
    fs::create_dir_all(&staging).map_err(Error::io(&staging))?;
    let mut params = Vec::new();
    for (name, t) in &model.params.tensors {
        let file = format!("{name}.tnsr");
        save_tensor(&staging.join(&file), t)?;
        params.push(ParamEntry {
            name: name.clone(),
            file,
            shape: t.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        config_hash: config.hash(),
        config: config.resolved_text(),
        model: ModelConfig::from_architecture(&model.spec.arch),
        input_shape: model.spec.input_shape.clone(),
        classes: model.spec.classes,
        params,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = staging.join(MANIFEST);
    fs::write(&mpath, json + "\n").map_err(Error::io(&mpath))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::rename(&staging, dir).map_err(Error::io(dir))
}

fn staging_path(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    dir.with_file_name(name)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if m.format != FORMAT {
        return Err(Error::Format {
            path,
            msg: format!("unsupported checkpoint format {:?}", m.format),
        });
    }
    Ok(m)
}

/// Load a checkpoint and the configuration it was trained with.
pub fn load_checkpoint(dir: &Path) -> Result<(Classifier, Config)> {
    let m = load_manifest(dir)?;
    let config = Config::from_toml(&m.config)?;
    let spec = m.model.spec(m.input_shape.clone(), m.classes)?;
    let mut tensors = Vec::with_capacity(m.params.len());
    for p in &m.params {
        let path = dir.join(&p.file);
        let t = load_tensor(&path)?;
        if t.shape() != p.shape.as_slice() {
            return Err(Error::Format {
                path,
                msg: format!("shape {:?} differs from manifest {:?}", t.shape(), p.shape),
            });
        }
        tensors.push((p.name.clone(), t));
    }
    let model = Classifier::new(spec, ModelParams { tensors })?;
    Ok((model, config))
}
