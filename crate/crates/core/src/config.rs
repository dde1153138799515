//! The single JSON file describing an experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::trainer::{PromptCounts, TrainConfig, TuningStrategy};

/// Learning rate of the desk experiment.
pub const DESK_LR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub gradcheck_tolerance: f64,
    pub gradcheck_coords: usize,
    pub gradcheck_step: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            gradcheck_tolerance: 1e-4,
            gradcheck_coords: 128,
            gradcheck_step: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub prompts: PromptCounts,
    pub train: TrainConfig,
    pub strategy: TuningStrategy,
    pub seeds: Vec<u64>,
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub verify: VerifyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: SynthConfig::default(),
            model: ModelConfig::default(),
            prompts: PromptCounts::default(),
            train: TrainConfig::default(),
            strategy: TuningStrategy::Pt,
            seeds: vec![0, 1, 2],
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("out"),
            verify: VerifyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// The variant used for the multi-seed training experiments: same
    /// volumes, widths and depths, eight times fewer first-stage tokens and
    /// a learning rate sized for 256 training samples.
    pub fn desk_experiment() -> Self {
        let mut cfg = Self::default();
        cfg.model.visual.patch = 8;
        cfg.train.lr = DESK_LR;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.model.visual.stage_grids()?;
        if self.model.visual.volume != self.data.volume {
            return Err(Error::Config(format!(
                "model.visual.volume {:?} differs from data.volume {:?}",
                self.model.visual.volume, self.data.volume
            )));
        }
        let t = &self.model.tabular;
        let f = &self.model.fusion;
        for (name, width, heads) in [("tabular", t.width, t.heads), ("fusion", f.width, f.heads)] {
            if heads == 0 || width == 0 || width % heads != 0 {
                return Err(Error::Config(format!("{name}: heads {heads} must divide width {width}")));
            }
        }
        if self.prompts.visual % 2 != 0 {
            return Err(Error::Config(format!(
                "prompts.visual must be even, got {}",
                self.prompts.visual
            )));
        }
        if self.prompts.visual == 0 || self.prompts.tabular == 0 {
            return Err(Error::Config("prompts.visual and prompts.tabular must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if !(self.verify.gradcheck_tolerance > 0.0) || self.verify.gradcheck_coords == 0 {
            return Err(Error::Config("verify settings must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let partial = ExperimentConfig::from_json(r#"{"seeds": [4], "strategy": "vistab"}"#).unwrap();
        assert_eq!(partial.seeds, vec![4]);
        assert_eq!(partial.strategy, TuningStrategy::VisTab);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::from_json(r#"{"train": {"epochz": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
        assert_eq!(err.exit_code(), 2);
        assert!(ExperimentConfig::from_json("{").is_err());
    }

    #[test]
    fn inconsistent_dims_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.volume = [16, 16, 16];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.prompts.visual = 5;
        assert!(cfg.validate().is_err());
    }
}
