//! Experiment configuration: JSON file, defaults and command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use crowdped_core::eval::SWEEP_THRESHOLDS;
use crowdped_core::pipeline::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Name of the resolved-configuration snapshot written to every output
/// directory.
pub const SNAPSHOT_FILE: &str = "resolved_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Dataset directory written by `gen-data`.
    pub train_data: Option<PathBuf>,
    /// Optional held-out dataset evaluated after training.
    pub test_data: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Matching IoU thresholds of `eval --sweep`.
    pub iou_thresholds: Vec<f64>,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train_data: None,
            test_data: None,
            output_dir: PathBuf::from("runs/default"),
            iou_thresholds: SWEEP_THRESHOLDS.to_vec(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Defaults overlaid with the file's contents; unknown keys are rejected.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(ExperimentConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(CliError::Usage("iou_thresholds must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Writes `value` as pretty JSON to `dir/SNAPSHOT_FILE`.
pub fn write_snapshot(dir: &Path, value: &impl Serialize) -> CliResult<()> {
    write_json(&dir.join(SNAPSHOT_FILE), value)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(crowdped_core::Error::from)?;
    fs::write(path, text + "\n").map_err(|e| crowdped_core::Error::io(path, e))?;
    Ok(())
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}
