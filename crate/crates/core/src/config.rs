//! Run configuration shared by the command-line tools. Values resolve as
//! command-line flag, then config file key, then default; the resolved
//! configuration is written next to every command's outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::ExtractConfig;
use crate::fusion::FusionConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Depth jump, in meters, that marks an occlusion edge.
    pub tau_depth: f32,
    pub max_invalid_fraction: f64,
    pub min_center_votes: usize,
    /// Patch grid stride for training frames.
    pub extract_stride: usize,
    /// Patch grid stride for test frames; defaults to `extract_stride`.
    pub test_stride: Option<usize>,
    pub train_fraction: f64,
    /// Explicit first test frame; overrides `train_fraction`.
    pub split_boundary: Option<usize>,
    /// Keep at most this many negatives per positive in the training split.
    pub balance: Option<f64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let e = ExtractConfig::default();
        Self {
            tau_depth: 0.10,
            max_invalid_fraction: e.max_invalid_fraction,
            min_center_votes: e.min_center_votes,
            extract_stride: e.stride,
            test_stride: None,
            train_fraction: 0.7,
            split_boundary: None,
            balance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub strides: Vec<usize>,
    /// Threshold for the binary edge mask.
    pub threshold: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            strides: vec![8],
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds weight initialization and shuffling.
    pub seed: u64,
    /// Worker threads; `None` uses all cores.
    pub threads: Option<usize>,
    pub deterministic: bool,
    /// Save a checkpoint every N epochs.
    pub checkpoint_every: Option<usize>,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub infer: InferConfig,
    /// Inputs and outputs of the command that wrote this file.
    pub paths: BTreeMap<String, PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn extract_config(&self) -> ExtractConfig {
        ExtractConfig {
            stride: self.dataset.extract_stride,
            max_invalid_fraction: self.dataset.max_invalid_fraction,
            min_center_votes: self.dataset.min_center_votes,
            channels: crate::dataset::Channels::Rgbd,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let d = &self.dataset;
        if !(d.tau_depth > 0.0 && d.tau_depth.is_finite()) {
            return bad(format!("dataset.tau_depth must be positive, got {}", d.tau_depth));
        }
        if !(0.0..=1.0).contains(&d.max_invalid_fraction) {
            return bad(format!("dataset.max_invalid_fraction {} outside [0, 1]", d.max_invalid_fraction));
        }
        if !(1..=4).contains(&d.min_center_votes) {
            return bad(format!("dataset.min_center_votes {} outside 1..=4", d.min_center_votes));
        }
        if d.extract_stride == 0 || d.test_stride == Some(0) {
            return bad("dataset strides must be at least 1".into());
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return bad(format!("dataset.train_fraction {} outside (0, 1)", d.train_fraction));
        }
        if let Some(b) = d.balance {
            if !(b > 0.0 && b.is_finite()) {
                return bad(format!("dataset.balance must be positive, got {b}"));
            }
        }
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.fusion.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.infer.strides.is_empty() {
            return bad("infer.strides is empty".into());
        }
        for &s in &self.infer.strides {
            FusionConfig {
                sweep_stride: s,
                ..self.fusion
            }
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if !(self.infer.threshold > 0.0 && self.infer.threshold < 1.0) {
            return bad(format!("infer.threshold {} outside (0, 1)", self.infer.threshold));
        }
        if self.threads == Some(0) || self.checkpoint_every == Some(0) {
            return bad("threads and checkpoint_every must be at least 1".into());
        }
        Ok(())
    }
}
