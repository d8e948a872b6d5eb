use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::net::ModelConfig;
use super::schedule::{NoiseSchedule, ScheduleConfig};
use super::DiffusionError;
use crate::numcore::ParamMap;

pub const CHECKPOINT_FORMAT: &str = "ablate-ckpt/1";

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of the compact JSON encoding of `value`.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("serializable"))
}

/// Model architecture plus the record of how the parameters were produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    /// Free-form description of the producing run (pretraining or ablation settings).
    pub run: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub config: CheckpointConfig,
    pub schedule: ScheduleConfig,
    pub params: ParamMap,
    #[serde(rename = "sha256-of-config")]
    pub config_hash: String,
    /// Content hashes of ancestors, nearest first.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lineage: Vec<String>,
}

impl Checkpoint {
    pub fn new(config: CheckpointConfig, schedule: ScheduleConfig, params: ParamMap, lineage: Vec<String>) -> Self {
        let config_hash = json_hash(&config);
        Self { format: CHECKPOINT_FORMAT.into(), config, schedule, params, config_hash, lineage }
    }

    /// Derived checkpoint: same model, new parameters, this checkpoint as parent.
    pub fn child(&self, params: ParamMap, run: serde_json::Value) -> Self {
        let mut lineage = vec![self.content_hash()];
        lineage.extend(self.lineage.iter().cloned());
        Self::new(CheckpointConfig { model: self.config.model, run }, self.schedule, params, lineage)
    }

    pub fn model(&self) -> &ModelConfig {
        &self.config.model
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule, DiffusionError> {
        NoiseSchedule::new(self.schedule)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }

    /// Hash of the serialized checkpoint; identifies it in lineage and provenance.
    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    /// Whether `other` is this checkpoint or one of its ancestors.
    pub fn descends_from(&self, other: &Checkpoint) -> bool {
        let h = other.content_hash();
        self.content_hash() == h || self.lineage.contains(&h)
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(DiffusionError::Format(format!("unknown checkpoint format {:?}", self.format)));
        }
        if json_hash(&self.config) != self.config_hash {
            return Err(DiffusionError::Format("config hash does not match config".into()));
        }
        self.config.model.check_params(&self.params)?;
        NoiseSchedule::new(self.schedule)?;
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, DiffusionError> {
        let ck: Checkpoint = serde_json::from_str(s).map_err(|e| DiffusionError::Format(e.to_string()))?;
        ck.validate()?;
        Ok(ck)
    }

    pub fn load(path: &Path) -> Result<Self, DiffusionError> {
        let s = std::fs::read_to_string(path).map_err(|e| DiffusionError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: &Path) -> Result<(), DiffusionError> {
        std::fs::write(path, self.to_json()).map_err(|e| DiffusionError::Io(format!("{}: {e}", path.display())))
    }
}
