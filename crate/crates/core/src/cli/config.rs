//! Run configuration shared by every subcommand.
//!
//! Resolution order is defaults, then the TOML file given by `--config`,
//! then command-line flags. A single top-level `seed` is copied into every
//! component (corpus generation, split, initialization, shuffling, noise)
//! unless `attack_seed` overrides the noise stream.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::dataset::{SplitMode, SynthConfig};
use crate::market_data::{DEFAULT_HORIZONS, DEFAULT_VOL_FLOOR};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Val,
    #[default]
    Test,
    All,
}

impl std::str::FromStr for Part {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Part::Train),
            "val" => Ok(Part::Val),
            "test" => Ok(Part::Test),
            "all" => Ok(Part::All),
            other => Err(format!("unknown split part `{other}` (train|val|test|all)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub mode: SplitMode,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: [0.8, 0.1, 0.1],
            mode: SplitMode::Stratified,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// attack radii to evaluate; 0 gives the clean row
    pub eps: Vec<f64>,
    pub part: Part,
    /// horizons trained by `ablate`
    pub horizons: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            eps: vec![0.0, 0.01],
            part: Part::Test,
            horizons: vec![3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VolConfig {
    pub horizons: Vec<usize>,
    pub floor: f64,
}

impl Default for VolConfig {
    fn default() -> Self {
        Self {
            horizons: DEFAULT_HORIZONS.to_vec(),
            floor: DEFAULT_VOL_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub attack_seed: Option<u64>,
    pub jobs: usize,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub eval: EvalConfig,
    pub vol: VolConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    /// Copies the run seed and job count into every component.
    pub fn finalize(mut self) -> Self {
        self.jobs = self.jobs.max(1);
        self.synth.seed = self.seed;
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.train.jobs = self.jobs;
        self.train.attack.seed = self.attack_seed.unwrap_or(self.seed);
        self
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 7
            [train]
            epochs = 3
            [train.attack]
            epsilon = 0.05
            mode = "rand"
            [split]
            mode = "chronological"
            "#,
        )
        .unwrap();
        let cfg = cfg.finalize();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.train.attack.epsilon, 0.05);
        assert_eq!(cfg.train.attack.seed, 7);
        assert_eq!(cfg.model.seed, 7);
        assert_eq!(cfg.split.mode, SplitMode::Chronological);
        assert_eq!(cfg.jobs, 1);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nepoch = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("sede = 3\n").is_err());
    }
}
