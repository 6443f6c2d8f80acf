//! Single-file checkpoints: safetensors arrays with the config and manifest in the header
//! metadata.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::{ParameterPartition, PromptSegModel};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const FORMAT_VERSION: u32 = 1;
const CONFIG_KEY: &str = "sonoseg.config";
const MANIFEST_KEY: &str = "sonoseg.manifest";

/// Where a distilled checkpoint came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub teacher_checksum: String,
    pub teacher_parameters: usize,
    pub size_ratio: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub seed: u64,
    pub partition: ParameterPartition,
    pub checksum: String,
    pub encoder_checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl CheckpointManifest {
    pub fn describe(model: &PromptSegModel, provenance: Option<Provenance>) -> Result<Self> {
        Ok(Self {
            format_version: FORMAT_VERSION,
            seed: model.seed(),
            partition: model.parameter_partition(),
            checksum: model.checksum()?,
            encoder_checksum: model.encoder_checksum()?,
            provenance,
        })
    }
}

pub fn checkpoint_bytes(model: &PromptSegModel, provenance: Option<Provenance>) -> Result<Vec<u8>> {
    let manifest = CheckpointManifest::describe(model, provenance)?;
    let mut metadata = HashMap::new();
    metadata.insert(
        CONFIG_KEY.to_string(),
        serde_json::to_string_pretty(model.config()).expect("config serializes"),
    );
    metadata.insert(
        MANIFEST_KEY.to_string(),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    );
    let tensors: Vec<(String, candle_core::Tensor)> = model
        .params()
        .iter()
        .map(|(name, var)| (name.clone(), var.as_tensor().clone()))
        .collect();
    safetensors::serialize(tensors, Some(metadata))
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_checkpoint(
    model: &PromptSegModel,
    path: &Path,
    provenance: Option<Provenance>,
) -> Result<CheckpointManifest> {
    let bytes = checkpoint_bytes(model, provenance.clone())?;
    write_atomic(path, &bytes)?;
    CheckpointManifest::describe(model, provenance)
}

pub fn read_checkpoint_header(bytes: &[u8]) -> Result<(ModelConfig, CheckpointManifest)> {
    let (_, metadata) = safetensors::SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let info = metadata
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no metadata".into()))?;
    let field = |key: &str| {
        info.get(key)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks {key}")))
    };
    let config: ModelConfig = serde_json::from_str(field(CONFIG_KEY)?)
        .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
    let manifest: CheckpointManifest = serde_json::from_str(field(MANIFEST_KEY)?)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {}",
            manifest.format_version
        )));
    }
    Ok((config, manifest))
}

pub fn load_checkpoint_bytes(bytes: &[u8], dtype: DType) -> Result<(PromptSegModel, CheckpointManifest)> {
    let (config, manifest) = read_checkpoint_header(bytes)?;
    let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?;
    let model = PromptSegModel::from_tensors(config, manifest.seed, tensors, dtype)?;
    Ok((model, manifest))
}

pub fn load_checkpoint(path: &Path) -> Result<(PromptSegModel, CheckpointManifest)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint_bytes(&bytes, DType::F32).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
