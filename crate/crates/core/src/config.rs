//! Run configuration file: TOML with `[data]`, `[representation]`, `[model]`
//! and `[train]` sections. Every key is optional and falls back to the
//! defaults below; unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_io::NMNIST_SENSOR_SIZE;
use crate::model::{EfvConfig, Mode};
use crate::representations::PreprocessConfig;
use crate::training::{OptimizerConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EventFormat {
    #[default]
    Nmnist,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub format: EventFormat,
    pub sensor_width: u32,
    pub sensor_height: u32,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            format: EventFormat::Nmnist,
            sensor_width: NMNIST_SENSOR_SIZE,
            sensor_height: NMNIST_SENSOR_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub grid: [usize; 2],
    pub width: usize,
    pub heads: usize,
    pub st_depth: usize,
    pub fusion_depth: usize,
    pub stem_channels: Vec<usize>,
    pub gmm_hidden: usize,
    pub gmm_kernels: usize,
    pub radius: f64,
    pub head_hidden: usize,
    pub classes: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = EfvConfig::default();
        Self {
            grid: [m.grid.0, m.grid.1],
            width: m.width,
            heads: m.heads,
            st_depth: m.st_depth,
            fusion_depth: m.fusion_depth,
            stem_channels: m.stem_channels,
            gmm_hidden: m.gmm_hidden,
            gmm_kernels: m.gmm_kernels,
            radius: m.radius,
            head_hidden: m.head_hidden,
            classes: m.classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_period: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub mode: Mode,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    pub augment: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.base_lr,
            lr_decay: t.lr_decay,
            decay_period: t.decay_period,
            epochs: t.epochs,
            batch_size: t.batch_size,
            mode: t.mode,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            augment: t.augment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub representation: PreprocessConfig,
    pub model: ModelSection,
    pub train: TrainSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The fully materialized configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.sensor_width == 0 || self.data.sensor_height == 0 {
            return Err(Error::InvalidConfig("sensor size must be positive".into()));
        }
        self.model_config(0).validate()?;
        self.train_config(0).validate()
    }

    pub fn model_config(&self, seed: u64) -> EfvConfig {
        let m = &self.model;
        EfvConfig {
            preprocess: self.representation,
            grid: (m.grid[0], m.grid[1]),
            width: m.width,
            heads: m.heads,
            st_depth: m.st_depth,
            fusion_depth: m.fusion_depth,
            stem_channels: m.stem_channels.clone(),
            gmm_hidden: m.gmm_hidden,
            gmm_kernels: m.gmm_kernels,
            radius: m.radius,
            head_hidden: m.head_hidden,
            classes: m.classes,
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            base_lr: t.lr,
            lr_decay: t.lr_decay,
            decay_period: t.decay_period,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed,
            mode: t.mode,
            optimizer: match t.optimizer {
                OptimizerKind::Adam => OptimizerConfig::Adam {
                    beta1: t.beta1,
                    beta2: t.beta2,
                    eps: t.eps,
                },
                OptimizerKind::Sgd => OptimizerConfig::Sgd { momentum: t.momentum },
            },
            augment: t.augment,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model_config(3), EfvConfig { seed: 3, ..EfvConfig::default() });
        assert_eq!(cfg.train_config(3), TrainConfig { seed: 3, ..TrainConfig::default() });
    }

    #[test]
    fn defaults_match_the_training_recipe() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.lr_decay, 0.1);
        assert_eq!(cfg.train.decay_period, 60);
        assert_eq!(cfg.model.radius, 2.0);
        assert_eq!(cfg.representation.top_k, 512);
        assert_eq!(cfg.representation.frames, 8);
        assert_eq!(cfg.model.grid[0] * cfg.model.grid[1], 8);
        let c = cfg.representation.cell;
        assert_eq!((c.h, c.w, c.t), (4.0, 4.0, 4.0));
    }

    #[test]
    fn partial_sections_override() {
        let text = "[representation]\ntop_k = 64\ncell = { t = 2.0 }\n\n[model]\nclasses = 4\n\n[train]\nmode = \"voxel_only\"\noptimizer = \"sgd\"\n";
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.representation.top_k, 64);
        assert_eq!(cfg.representation.cell.t, 2.0);
        assert_eq!(cfg.representation.cell.h, 4.0);
        assert_eq!(cfg.model.classes, 4);
        let t = cfg.train_config(0);
        assert_eq!(t.mode, Mode::VoxelOnly);
        assert_eq!(t.optimizer, OptimizerConfig::Sgd { momentum: 0.9 });
    }

    #[test]
    fn materialized_config_roundtrips() {
        let cfg = RunConfig::from_toml("[model]\nwidth = 32\n").unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        for text in [
            "[model]\ndepth = 3\n",
            "[train]\nmode = \"both\"\n",
            "[model]\nheads = 5\n",
            "[train]\nlr = 0.0\n",
            "[representation]\ncell = { h = 0.5 }\n",
            "[data]\nformat = \"aedat\"\n",
            "not toml",
        ] {
            assert!(RunConfig::from_toml(text).is_err(), "{text}");
        }
    }
}
