//! JSON settings files accepted by `--config`, one per verb. Every field
//! has a default, so `{}` is a valid file for each of them.

use std::fs;
use std::path::{Path, PathBuf};

use mdfn::data::SceneSpec;
use mdfn::eval::{default_iou_thresholds, Interpolation, PostprocessConfig};
use mdfn::network::Variant;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub fn read_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C, CliError> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSettings {
    pub spec: SceneSpec,
    pub start: usize,
    pub count: usize,
}

impl Default for DatasetSettings {
    fn default() -> Self {
        Self {
            spec: SceneSpec {
                seed: 42,
                ..SceneSpec::default()
            },
            start: 0,
            count: 64,
        }
    }
}

/// Where `eval` gets its detections from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionSource {
    /// Run the checkpointed model.
    #[default]
    Model,
    /// Ground truth verbatim, score 1.
    Oracle,
    /// Ground truth with every box randomly shifted and rescaled.
    Jitter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Expected model variant; a checkpoint of another variant is refused.
    pub variant: Option<Variant>,
    /// Evaluate a dataset written by `mdfn dataset` instead of generating one.
    pub data_dir: Option<PathBuf>,
    pub dataset: SceneSpec,
    pub start: usize,
    pub count: usize,
    pub detections: DetectionSource,
    /// Jitter amplitude relative to box size.
    pub jitter: f64,
    pub jitter_seed: u64,
    pub iou_thresholds: Vec<f64>,
    pub interpolation: Interpolation,
    pub postprocess: PostprocessConfig,
    /// Also write the small/occluded breakdown.
    pub strata: bool,
    pub batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            variant: None,
            data_dir: None,
            dataset: SceneSpec {
                seed: 42,
                ..SceneSpec::default()
            },
            // past the scenes the default training run uses
            start: 10_000,
            count: 256,
            detections: DetectionSource::Model,
            jitter: 0.1,
            jitter_seed: 0,
            iou_thresholds: default_iou_thresholds(),
            interpolation: Interpolation::AllPoint,
            postprocess: PostprocessConfig::default(),
            strata: true,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSettings {
    pub variant: Option<Variant>,
    pub postprocess: PostprocessConfig,
}
