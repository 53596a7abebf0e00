//! The JSON run configuration and its command-line overrides.

use std::path::{Path, PathBuf};

use jointformer::inference::InferenceConfig;
use jointformer::trainer::{SynthConfig, TrainConfig};
use jointformer::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub synth: SynthConfig,
    /// Network checked by `gradcheck`.
    pub gradcheck_model: ModelConfig,
    pub train_videos: usize,
    pub val_videos: usize,
    /// Dataset root holding `train/` and `val/`. Without it `train` and
    /// `ablate` generate the synthetic set in memory.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::toy(),
            inference: InferenceConfig {
                background_rule: TrainConfig::toy().background_rule,
                ..InferenceConfig::default()
            },
            synth: SynthConfig::default(),
            gradcheck_model: ModelConfig::tiny(),
            train_videos: 80,
            val_videos: 20,
            data: None,
            checkpoint: None,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every section, stopping at the first violation.
    pub fn validate(&self) -> Result<()> {
        let section = |name: &str, r: Result<()>| r.map_err(|e| Error::Config(format!("{name}: {e}")));
        section("model", self.model.validate())?;
        section("train", self.train.validate())?;
        section("inference", self.inference.validate())?;
        section("synth", self.synth.validate())?;
        section("gradcheck_model", self.gradcheck_model.validate())?;
        if self.train_videos == 0 {
            return Err(Error::Config("train_videos must be >= 1".into()));
        }
        Ok(())
    }
}
