//! The declarative run configuration: one TOML document holding backend,
//! model, schedule, data paths, and seed. The file is copied verbatim into
//! the run directory so every emitted number can be traced to its inputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sscap_core::backend::{CachedBackend, JointEmbeddingBackend, ToyBackend};
use sscap_core::captioner::{CaptionModel, CaptionModelConfig, MappingNetworkConfig, ToyLm, ToyLmConfig};
use sscap_core::data::BackendRef;
use sscap_core::error::{Error, Result};
use sscap_core::trainer::{StageConfig, TrainingSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub backend: BackendRef,
    pub model: ModelSpec,
    pub data: DataPaths,
    pub schedule: ScheduleSpec,
}

/// Caption-model architecture plus the toy language model underneath it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub mapper: MappingNetworkConfig,
    pub finetune_lm: bool,
    pub max_caption_length: usize,
    /// Defaults to the last vocabulary id.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub end_token: Option<u32>,
    pub lm: ToyLmConfig,
}

/// Manifest locations, resolved relative to the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub labeled: PathBuf,
    pub unlabeled: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sealed: Option<PathBuf>,
    /// Full captioned pool, required only by the labeled-size sweep.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub full: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub eval_every: usize,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Manifest(format!("run config: {e}")))
    }

    /// Canonical serialization; loading and re-serializing a config is a
    /// fixed point of this function.
    pub fn canonical(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn schedule(&self) -> TrainingSchedule {
        TrainingSchedule {
            stages: self.schedule.stages.clone(),
            eval_every: self.schedule.eval_every,
            seed: self.seed,
        }
    }

    pub fn build_backend(&self, base: &Path) -> Result<Box<dyn JointEmbeddingBackend>> {
        match &self.backend {
            BackendRef::Toy(spec) => Ok(Box::new(ToyBackend::new(*spec)?)),
            BackendRef::Cache { path } => Ok(Box::new(CachedBackend::open(&resolve(
                base,
                Path::new(path),
            ))?)),
        }
    }

    pub fn build_model(&self) -> Result<CaptionModel> {
        let spec = &self.model;
        let lm = ToyLm::new(spec.lm.clone(), spec.finetune_lm)?;
        CaptionModel::new(
            CaptionModelConfig {
                mapper: spec.mapper.clone(),
                finetune_lm: spec.finetune_lm,
                max_caption_length: spec.max_caption_length,
                end_token: spec
                    .end_token
                    .unwrap_or((spec.lm.vocabulary_size - 1) as u32),
            },
            Box::new(lm),
        )
    }
}

/// Resolve a config-relative path against the config file's directory.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}
