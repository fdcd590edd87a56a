//! Run configuration files (canonical JSON).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::canonical_json;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::skeleton::{PreprocessConfig, Protocol, SynthSpec};
use crate::train::TrainConfig;

/// Source of skeleton data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// NTU RGB+D `.skeleton` files.
    Ntu,
    /// Northwestern-UCLA JSON samples.
    Nucla,
    /// Generated motions (`synth` section of the config).
    Synth,
}

/// Everything a CLI run needs. Missing keys take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: DatasetKind,
    /// Train/test split; `None` trains and evaluates on everything.
    pub protocol: Option<Protocol>,
    /// Raw-data pipeline used by `preprocess`.
    pub preprocess: PreprocessConfig,
    pub synth: SynthSpec,
    /// Seed of synthetic data generation.
    pub data_seed: u64,
    pub eval_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            dataset: DatasetKind::Synth,
            protocol: None,
            preprocess: PreprocessConfig::default(),
            synth: SynthSpec::default(),
            data_seed: 0,
            eval_batch_size: 32,
        }
    }
}

impl RunConfig {
    /// Desk-scale setup: tiny widths, two synthetic classes, the default
    /// schedule compressed to 30 epochs and batches of 8.
    pub fn tiny() -> Self {
        let synth = SynthSpec::default();
        RunConfig {
            model: ModelConfig::tiny(synth.classes.len()),
            train: TrainConfig {
                batch_size: 8,
                ..TrainConfig::scaled_30()
            },
            synth,
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.preprocess.validate()?;
        if self.eval_batch_size == 0 {
            return Err(Error::contract("eval_batch_size must be at least 1"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text).map_err(|e| match e {
            Error::Parse { line, message } => Error::Format {
                path: path.to_path_buf(),
                message: format!("line {line}: {message}"),
            },
            other => other,
        })
    }

    /// Sorted-key JSON on one line.
    pub fn to_canonical_json(&self) -> Result<String> {
        canonical_json(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_canonical_json()? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
