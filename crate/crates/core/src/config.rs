//! Lab configuration file.
//!
//! TOML with one table per stage. Every table rejects unknown keys, and
//! missing keys take the defaults shown by `nartlab --dump-config`.
//!
//! ```
//! use nartlab::config::LabConfig;
//!
//! let cfg = LabConfig::parse("[teacher]\nsteps = 10\n").unwrap();
//! assert_eq!(cfg.teacher.steps, 10);
//! assert!(LabConfig::parse("[teacher]\nstep = 10\n").is_err());
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticTaskSpec;
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::nn::ModelConfig;
use crate::train::{AblationMode, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSection {
    /// Length bias `C`; derived from the training corpus when absent.
    pub length_bias: Option<i64>,
    pub halfwidth: usize,
    pub rescore: bool,
    pub length_normalize: bool,
}

impl Default for InferenceSection {
    fn default() -> Self {
        let d = InferenceConfig::default();
        Self {
            length_bias: None,
            halfwidth: d.halfwidth,
            rescore: d.rescore,
            length_normalize: d.length_normalize,
        }
    }
}

impl InferenceSection {
    pub fn resolve(&self, fallback_bias: i64) -> InferenceConfig {
        InferenceConfig {
            length_bias: self.length_bias.unwrap_or(fallback_bias),
            halfwidth: self.halfwidth,
            rescore: self.rescore,
            length_normalize: self.length_normalize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabConfig {
    pub data: SyntheticTaskSpec,
    /// Vocabulary sizes are overwritten by the corpus vocabulary.
    pub model: ModelConfig,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    pub inference: InferenceSection,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            data: SyntheticTaskSpec::default(),
            model: ModelConfig::default(),
            teacher: TrainConfig {
                steps: 3000,
                lr_scale: 0.7,
                dropout: 0.0,
                ablation: AblationMode::Nll,
                ..TrainConfig::default()
            },
            student: TrainConfig {
                steps: 600,
                dropout: 0.0,
                cache_hints: true,
                ..TrainConfig::default()
            },
            inference: InferenceSection::default(),
        }
    }
}

impl LabConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies a global seed to data generation and both trainers.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.teacher.seed = seed;
        self.student.seed = seed;
        self
    }
}
