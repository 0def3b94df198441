use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::losses::{DeltaNormMode, LossConfig};
use crate::optim::AdamConfig;
use crate::pruner::PrunerConfig;
use crate::segnet::{NormKind, UnetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    /// Including background; the generator draws ellipses (1) and rings (2).
    pub classes: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { n: 200, height: 32, width: 32, classes: 3 }
    }
}

/// Every knob of a training run. Missing keys take the defaults below;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub omega: usize,
    pub tau_max: f64,
    pub kappa: u32,
    pub rho: usize,
    pub mu: f64,
    pub delta_norm_mode: DeltaNormMode,
    pub levels: usize,
    pub init_filters: usize,
    pub norm: NormKind,
    pub lr0: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub pruning_enabled: bool,
    pub capture_feature_maps: bool,
    /// Validation images forwarded for feature-map capture.
    pub probe_images: usize,
    pub strict_validation_increase: bool,
    pub horizontal_flip: bool,
    pub precision: Precision,
    pub dataset: DatasetSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            lambda: 0.5,
            omega: 2,
            tau_max: 0.3,
            kappa: 15,
            rho: 5,
            mu: 2.0,
            delta_norm_mode: DeltaNormMode::MinmaxFeatureMaps,
            levels: 3,
            init_filters: 8,
            norm: NormKind::Instance,
            lr0: 1e-2,
            weight_decay: 1e-5,
            seed: 0,
            pruning_enabled: true,
            capture_feature_maps: false,
            probe_images: 4,
            strict_validation_increase: false,
            horizontal_flip: false,
            precision: Precision::F64,
            dataset: DatasetSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.capture_feature_maps && self.probe_images == 0 {
            return bad("probe_images must be >= 1 when capturing".into());
        }
        let factor = 1usize.checked_shl(self.levels.saturating_sub(1) as u32).unwrap_or(0);
        let d = &self.dataset;
        if factor == 0 || !d.height.is_multiple_of(factor) || !d.width.is_multiple_of(factor) {
            return bad(format!("{}x{} images are not divisible by 2^(levels-1)", d.height, d.width));
        }
        if d.classes != 3 {
            return bad(format!("the synthetic generator draws exactly 3 classes, got {}", d.classes));
        }
        self.loss().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.pruner().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { lambda: self.lambda, omega: self.omega, delta_norm_mode: self.delta_norm_mode }
    }

    pub fn pruner(&self) -> PrunerConfig {
        PrunerConfig {
            tau_max: self.tau_max,
            kappa: self.kappa,
            rho: self.rho,
            mu: self.mu,
            strict_validation_increase: self.strict_validation_increase,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { weight_decay: self.weight_decay, ..AdamConfig::default() }
    }

    pub fn unet(&self) -> UnetSpec {
        UnetSpec {
            levels: self.levels,
            init_filters: self.init_filters,
            in_channels: 1,
            num_classes: self.dataset.classes,
            norm: self.norm,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.lambda, cfg.omega, cfg.tau_max, cfg.kappa, cfg.rho, cfg.mu), (0.5, 2, 0.3, 15, 5, 2.0));
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_files_and_unknown_keys() {
        let cfg = TrainConfig::from_toml("epochs = 3\nlambda = 0.0\n[dataset]\nn = 20\n").unwrap();
        assert_eq!((cfg.epochs, cfg.lambda, cfg.dataset.n, cfg.dataset.height), (3, 0.0, 20, 32));
        assert!(TrainConfig::from_toml("epochz = 3").is_err());
        assert!(TrainConfig::from_toml("[dataset]\nsize = 3").is_err());
        assert!(TrainConfig::from_toml("levels = 4\n[dataset]\nheight = 20").is_err());
        assert!(TrainConfig::from_toml("delta_norm_mode = \"divide_by_max_distance\"").is_ok());
    }
}
