//! One human-editable TOML file covers every module's configuration; every
//! section falls back to its defaults when omitted.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::MppiConfig;
use crate::error::Result;
use crate::harness::experiments::ExperimentConfig;
use crate::harness::report::Thresholds;
use crate::harness::RunConfig;
use crate::models::ModelConfig;
use crate::sim::RandomizationRanges;
use crate::track::TrackConfig;
use crate::training::TrainingConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub ranges: RandomizationRanges,
    pub track: TrackConfig,
    pub controller: MppiConfig,
    pub run: RunConfig,
    pub training: TrainingConfig,
    pub experiment: ExperimentConfig,
    pub thresholds: Thresholds,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<AppConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: AppConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ranges.validate()?;
        self.track.validate()?;
        self.controller.validate()?;
        self.training.validate()?;
        self.experiment.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        AppConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_toml_overrides_defaults() {
        let text = r#"
            [controller]
            candidates = 32
            horizon = 10

            [ranges]
            mass = [3.0, 4.0]

            [thresholds]
            min_zero_budget_completion = 0.8
        "#;
        let cfg: AppConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.controller.candidates, 32);
        assert_eq!(cfg.controller.horizon, 10);
        assert_eq!(cfg.controller.stochastic_evals, 8); // default retained
        assert_eq!(cfg.ranges.mass, [3.0, 4.0]);
        assert!((cfg.thresholds.min_zero_budget_completion - 0.8).abs() < 1e-12);
    }

    #[test]
    fn invalid_sections_are_rejected() {
        let text = r#"
            [controller]
            alpha = 1.5
        "#;
        let cfg: AppConfig = toml::from_str(text).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn roundtrip_through_toml() {
        let cfg = AppConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: AppConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.controller.candidates, cfg.controller.candidates);
        assert_eq!(back.model.context_dim, cfg.model.context_dim);
    }
}
