//! Run configuration, stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SpdHeadConfig, ToyBackboneConfig, VariantId};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SPDPOSE_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "spdpose-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub patience: usize,
    pub factor: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { patience: 4, factor: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpdHeadSettings {
    /// Explicit dimension chain; derived from the variant when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<usize>>,
    pub layers: usize,
}

impl Default for SpdHeadSettings {
    fn default() -> Self {
        Self { dims: None, layers: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub n_pairs: usize,
    pub bins: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { n_pairs: 20_000, bins: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub variant: VariantId,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub lr_stiefel: f64,
    pub lr_adam: f64,
    pub lambda: f64,
    pub eps_reeig: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub scheduler: SchedulerConfig,
    pub dataset: DatasetConfig,
    pub backbone: ToyBackboneConfig,
    pub spd_head: SpdHeadSettings,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: VariantId::Full6d,
            seed: 0,
            output_dir: None,
            lr_stiefel: 1e-2,
            lr_adam: 1e-4,
            lambda: 1e-3,
            eps_reeig: SpdHeadConfig::DEFAULT_EPS,
            batch_size: 8,
            epochs: 30,
            scheduler: SchedulerConfig::default(),
            dataset: DatasetConfig::default(),
            backbone: ToyBackboneConfig::default(),
            spd_head: SpdHeadSettings::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_stiefel", self.lr_stiefel),
            ("lr_adam", self.lr_adam),
            ("lambda", self.lambda),
            ("eps_reeig", self.eps_reeig),
            ("scheduler.factor", self.scheduler.factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.scheduler.factor >= 1.0 {
            return Err(Error::Config("scheduler.factor must be below 1".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if self.dataset.n_train == 0 || self.dataset.n_val == 0 {
            return Err(Error::Config("dataset needs non-empty train and val splits".into()));
        }
        if self.spd_head.layers == 0 {
            return Err(Error::Config("spd_head.layers must be at least 1".into()));
        }
        if self.analysis.n_pairs == 0 || self.analysis.bins == 0 {
            return Err(Error::Config("analysis.n_pairs and analysis.bins must be positive".into()));
        }
        if self.dataset.camera.width != self.backbone.input_size || self.dataset.camera.height != self.backbone.input_size {
            return Err(Error::Config("camera image size must equal backbone.input_size".into()));
        }
        self.dataset.camera.validate()?;
        self.dataset.translation_box.validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model_config_for(self.variant)
    }

    pub fn model_config_for(&self, variant: VariantId) -> ModelConfig {
        let mut m = ModelConfig::with_backbone(variant, self.backbone.clone(), self.spd_head.dims.clone(), self.eps_reeig);
        if self.spd_head.dims.is_none() && self.spd_head.layers != 4 {
            let n_in = m.head.dims[0];
            m.head = SpdHeadConfig::interpolated(n_in, variant.head_out_dim(), self.spd_head.layers, self.eps_reeig);
        }
        m
    }

    /// Explicit directory, else the environment default, else `spdpose-out`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(default_output_dir)
    }
}

pub fn default_output_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CameraModel, TranslationBox};

    #[test]
    fn defaults_match_documented_values() {
        let c = RunConfig::default();
        assert_eq!((c.lr_stiefel, c.lr_adam, c.lambda, c.eps_reeig), (1e-2, 1e-4, 1e-3, 1e-4));
        assert_eq!((c.batch_size, c.epochs, c.scheduler.patience, c.scheduler.factor), (8, 30, 4, 0.5));
        assert_eq!((c.dataset.n_train, c.dataset.n_val, c.dataset.n_test), (2000, 200, 500));
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.variant = VariantId::EulerSpd3;
        c.seed = 17;
        c.lr_adam = 3.3e-4;
        c.output_dir = Some(PathBuf::from("runs/x"));
        c.spd_head.dims = Some(vec![16, 9, 3]);
        c.dataset.translation_box = TranslationBox { min: [-0.01, -0.015, 0.6], max: [0.01, 0.0125, 0.7] };
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&d.to_toml_string().unwrap()).unwrap(), d);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_toml_str("variant = \"mlp_head\"\nepochs = 2\n[dataset]\nn_train = 10\n").unwrap();
        assert_eq!(c.variant, VariantId::MlpHead);
        assert_eq!(c.epochs, 2);
        assert_eq!(c.dataset.n_train, 10);
        assert_eq!(c.dataset.n_val, 200);
        assert_eq!(c.dataset.camera, CameraModel::default());
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        for text in ["lr_adam = 0.0", "epochs = 0", "variant = \"nope\"", "bogus = 1", "[spd_head]\ndims = [16, 64, 4]"] {
            let e = RunConfig::from_toml_str(text).unwrap_err();
            assert_eq!(e.class(), "ConfigError", "{text}: {e}");
        }
    }

    #[test]
    fn head_dims_follow_variant() {
        let c = RunConfig::default();
        assert_eq!(c.model_config_for(VariantId::Full6d).head.dims, vec![16, 13, 10, 7, 4]);
        assert_eq!(c.model_config_for(VariantId::EulerSpd3).head.dims.last(), Some(&3));
        let mut c2 = c.clone();
        c2.spd_head.layers = 2;
        assert_eq!(c2.model_config().head.dims, vec![16, 10, 4]);
    }
}
