//! Pipeline configuration: one JSON document with full defaulting.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::EnvelopeSpec;
use crate::ccm::MetricConfig;
use crate::disturbance::DatasetConfig;
use crate::dynamics::VehicleParams;
use crate::error::{Error, Result};
use crate::harness::{HarnessConfig, ScenarioPresets};
use crate::nn::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub vehicle: VehicleParams,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub envelope: EnvelopeSpec,
    pub metric: MetricConfig,
    pub harness: HarnessConfig,
    pub scenarios: ScenarioPresets,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scenarios = ScenarioPresets::default();
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            vehicle: VehicleParams::default(),
            dataset: DatasetConfig {
                ground_effect_rho: scenarios.ground_effect_rho,
                ..DatasetConfig::default()
            },
            train: TrainConfig::default(),
            envelope: EnvelopeSpec::default(),
            metric: MetricConfig::default(),
            harness: HarnessConfig::default(),
            scenarios,
            seeds: vec![1],
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Pipeline stage whose inputs determine an artifact's config hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Dataset,
    Model,
    Metric,
    Run,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Schema {
                expected: CONFIG_SCHEMA_VERSION,
                found: self.schema_version,
            });
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        self.vehicle.validate()?;
        self.envelope.validate()?;
        self.metric.validate()?;
        self.harness.validate()
    }

    /// SHA-256 over the sections a stage depends on.
    pub fn stage_hash(&self, stage: Stage) -> Result<String> {
        let value = match stage {
            Stage::Dataset => serde_json::to_vec(&(&self.vehicle, &self.dataset))?,
            Stage::Model => {
                serde_json::to_vec(&(&self.vehicle, &self.dataset, &self.train, &self.envelope))?
            }
            Stage::Metric => serde_json::to_vec(&(&self.vehicle, &self.metric))?,
            Stage::Run => serde_json::to_vec(self)?,
        };
        Ok(sha256_hex(&value))
    }
}

pub(crate) fn digest_hex(bytes: &[u8]) -> String {
    sha256_hex(bytes)
}
