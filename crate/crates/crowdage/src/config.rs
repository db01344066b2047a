//! TOML run configuration for `crowdage train`.

use std::fs;
use std::path::{Path, PathBuf};

use crowdage_core::model::{ModelConfig, Preset};
use crowdage_core::pipeline::{TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub path: PathBuf,
    /// Overrides the weight stored in the dataset manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_preset")]
    pub preset: Preset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub datasets: Vec<DatasetRef>,
    /// Box-only multi-face scenes mixed into tiled batches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_only: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<PathBuf>,
    #[serde(default)]
    pub validation_single_face: bool,
    /// Starting weights; required in frozen-detector mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    /// Write a checkpoint every this many epochs (the last one always).
    #[serde(default = "one")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_preset() -> Preset {
    Preset::Desk
}

fn one() -> usize {
    1
}

impl RunConfig {
    /// Parses `path`; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::ConfigFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        // Absolute, so the echoed config replays from any directory.
        let base = std::path::absolute(
            path.parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new(".")),
        )
        .map_err(Error::io(path))?;
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for d in &mut self.datasets {
            fix(&mut d.path);
        }
        for p in [
            &mut self.detection_only,
            &mut self.validation,
            &mut self.init_checkpoint,
            &mut self.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::preset(self.preset, self.train.intermediate_connection)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Field-level checks; referenced paths must exist.
    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::Config(
                "datasets: at least one dataset is required".into(),
            ));
        }
        self.train
            .validate()
            .map_err(|e| Error::Config(format!("train: {e}")))?;
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every: must be at least 1".into()));
        }
        for (i, d) in self.datasets.iter().enumerate() {
            if !d.path.exists() {
                return Err(Error::Config(format!(
                    "datasets[{i}].path: {} does not exist",
                    d.path.display()
                )));
            }
            if let Some(w) = d.weight {
                if !(w.is_finite() && w > 0.0) {
                    return Err(Error::Config(format!(
                        "datasets[{i}].weight: {w} must be positive"
                    )));
                }
            }
        }
        for (field, p) in [
            ("detection_only", &self.detection_only),
            ("validation", &self.validation),
            ("init_checkpoint", &self.init_checkpoint),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "{field}: {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        if self.train.mode == TrainMode::FrozenDetector && self.init_checkpoint.is_none() {
            return Err(Error::Config(
                "init_checkpoint: frozen_detector mode needs pretrained detector weights".into(),
            ));
        }
        self.model_config().validate()?;
        Ok(())
    }
}
