//! Run configuration: every knob of the pipeline in one JSON document.
//!
//! Missing keys take their defaults and unknown keys are rejected, so a typo
//! fails loudly instead of silently running with a default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use ynet_core::baselines::BaselineParams;
use ynet_core::model::YNetConfig;
use ynet_core::patches::SamplingPlan;
use ynet_core::phantom::PhantomStyle;
use ynet_core::predict::CalibrationObjective;
use ynet_core::trainer::TrainSchedule;

use crate::error::{CliError, CliResult};

/// Volumes per split of the generated dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DatasetCounts {
    fn default() -> Self {
        DatasetCounts { train: 8, val: 2, test: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of the phantom dataset. Weight initialization and patch
    /// shuffling use `schedule.seed`.
    pub seed: u64,
    pub dataset: DatasetCounts,
    pub phantom: PhantomStyle,
    pub model: YNetConfig,
    pub sampling: SamplingPlan,
    pub schedule: TrainSchedule,
    pub baselines: BaselineParams,
    pub calibration: CalibrationObjective,
    /// Dataset directory holding the YVOL pairs and `manifest.json`.
    pub data_dir: PathBuf,
    /// Directory for checkpoints, logs and predictions.
    pub run_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            dataset: DatasetCounts::default(),
            phantom: PhantomStyle::default(),
            model: YNetConfig::default(),
            sampling: SamplingPlan::default(),
            schedule: TrainSchedule::default(),
            baselines: BaselineParams::default(),
            calibration: CalibrationObjective::default(),
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid with `path` when given.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| CliError::Config {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.dataset.train == 0 || self.dataset.val == 0 || self.dataset.test == 0 {
            return Err(CliError::Usage("dataset counts must all be >= 1".into()));
        }
        self.phantom.validate()?;
        self.model.validate()?;
        self.sampling.validate()?;
        self.schedule.validate()?;
        self.baselines.frangi.validate()?;
        if self.sampling.patch != self.model.patch_size {
            return Err(CliError::Usage(format!(
                "sampling.patch ({}) must equal model.patch_size ({})",
                self.sampling.patch, self.model.patch_size
            )));
        }
        Ok(())
    }

    /// Writes the effective configuration as `config.json` in `dir`.
    pub fn echo(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join("config.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::io(path, e))
    }
}

/// Parses a flag value with the same spelling as the JSON config
/// (`"none"`, `"encoder_last"`, `"dice"`, ...).
pub fn parse_keyword<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}
