//! Run configuration file: one JSON document with `model`, `train`,
//! `masking`, `data`, `eval` and `seed`. Unknown keys are rejected; omitted
//! keys take their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::synth::{SplitSizes, SynthConfig};
use crate::error::{Error, Result};
use crate::masking::MaskingConfig;
use crate::model::{KindSet, ModelConfig};
use crate::train::{RunSpec, TrainConfig};

/// Synthetic dataset size and split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub recordings: usize,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            recordings: 240,
            split: [200.0 / 240.0, 20.0 / 240.0, 20.0 / 240.0],
            synth: SynthConfig::default(),
        }
    }
}

impl DataConfig {
    /// Rounded train and validation counts; test takes the remainder.
    pub fn split_sizes(&self) -> Result<SplitSizes> {
        let sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|&f| !(f >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "data.split {:?} must be non-negative and sum to 1",
                self.split
            )));
        }
        let n = self.recordings as f64;
        let train = (n * self.split[0]).round() as usize;
        let validation = ((n * self.split[1]).round() as usize).min(self.recordings - train);
        Ok(SplitSizes {
            train,
            validation,
            test: self.recordings - train - validation,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Modality subsets evaluated when none is given on the command line.
    pub subsets: Vec<KindSet>,
    pub group_by: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            subsets: vec![KindSet::all()],
            group_by: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub masking: MaskingConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    /// Seeds synthetic data, initialisation, shuffling, masking and dropout.
    pub seed: u64,
}

impl RunConfig {
    /// Named starting points: `default` (full-size model), `desk` (small model
    /// and schedule for CPU-scale runs) and `tiny` (gradient-check size).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(RunConfig::default()),
            "desk" => Ok(RunConfig {
                model: ModelConfig::desk(),
                train: TrainConfig {
                    max_lr: 3e-3,
                    warmup_steps: 40,
                    decay_half_life_steps: 300,
                    effective_batch: 8,
                    micro_batch: 4,
                    patience_epochs: 4,
                    max_epochs: 12,
                    ..TrainConfig::default()
                },
                ..RunConfig::default()
            }),
            "tiny" => Ok(RunConfig {
                model: ModelConfig::gradcheck_tiny(),
                train: TrainConfig {
                    max_lr: 1e-2,
                    warmup_steps: 10,
                    decay_half_life_steps: 200,
                    effective_batch: 4,
                    micro_batch: 2,
                    patience_epochs: 3,
                    max_epochs: 5,
                    ..TrainConfig::default()
                },
                data: DataConfig {
                    recordings: 10,
                    split: [0.8, 0.1, 0.1],
                    synth: SynthConfig {
                        duration_epochs: 8,
                        ..SynthConfig::default()
                    },
                },
                ..RunConfig::default()
            }),
            other => Err(Error::Config(format!("unknown preset `{other}` (default, desk, tiny)"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.masking.validate()?;
        self.data.synth.validate()?;
        self.data.split_sizes()?;
        Ok(())
    }

    pub fn run_spec(&self) -> RunSpec {
        RunSpec {
            model: self.model.clone(),
            train: self.train.clone(),
            masking: self.masking.clone(),
            seed: self.seed,
        }
    }
}
