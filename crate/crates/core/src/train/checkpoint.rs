//! Checkpoint directories.
//!
//! ```text
//! <dir>/checkpoint.json   metadata: config, config hash, epoch, metrics
//! <dir>/params/           tensor archive of every model parameter
//! <dir>/backbone/         3-channel backbone archive (single-image models only)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::backbone::archive::{load_archive, save_archive};
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::fusion::{Architecture, ModelSpec};
use crate::nn::ParamStore;

pub const METADATA_FILE: &str = "checkpoint.json";
pub const PARAMS_DIR: &str = "params";
pub const BACKBONE_DIR: &str = "backbone";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub metrics: MetricsReport,
    /// Names of parameters that were frozen during training.
    pub frozen: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Directory that relative paths in `config` resolve against.
    pub config_dir: std::path::PathBuf,
    pub version: String,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub spec: ModelSpec,
    pub params: ParamStore<f32>,
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    config: &ExperimentConfig,
    epoch: usize,
    metrics: &MetricsReport,
    params: &ParamStore<f32>,
) -> Result<()> {
    let dir = dir.as_ref();
    let spec = config.model_spec();
    save_archive(dir.join(PARAMS_DIR), params)?;
    if spec.architecture == Architecture::Single {
        save_archive(dir.join(BACKBONE_DIR), &params.extract("backbone."))?;
    }
    let meta = CheckpointMeta {
        config: config.clone(),
        config_hash: config.hash(),
        epoch,
        metrics: metrics.clone(),
        frozen: params.iter().filter(|(_, p)| p.frozen).map(|(n, _)| n.to_string()).collect(),
        alpha: spec.alpha(params),
        config_dir: std::path::absolute(&config.base_dir).unwrap_or_else(|_| config.base_dir.clone()),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let path = dir.join(METADATA_FILE);
    let text = serde_json::to_string_pretty(&meta)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let path = dir.join(METADATA_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut meta: CheckpointMeta = serde_json::from_str(&text)?;
    meta.config.base_dir = meta.config_dir.clone();
    if meta.config.hash() != meta.config_hash {
        return Err(Error::Invalid(format!("{}: config hash does not match its config", path.display())));
    }
    let spec = meta.config.model_spec();
    let params = load_archive::<f32>(dir.join(PARAMS_DIR))?;
    let expected = spec.init_params::<f32>(0)?;
    for (name, p) in expected.iter() {
        let found = params.tensor(name)?;
        if found.shape() != p.value.shape() {
            return Err(Error::WeightShape {
                path: name.to_string(),
                expected: p.value.shape().to_vec(),
                found: found.shape().to_vec(),
            });
        }
    }
    let mut params = params;
    for name in &meta.frozen {
        if let Some(p) = params.get_mut(name) {
            p.frozen = true;
        }
    }
    Ok(Checkpoint { meta, spec, params })
}
