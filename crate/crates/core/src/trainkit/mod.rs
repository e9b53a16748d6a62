//! Optimizer, augmentation and the two training steps.

mod adam;
mod augment;
mod objective;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::falnet::NetworkConfig;
use crate::losses::{LossWeights, TrainStep};
use crate::quantize::{LevelConfig, QuantMode};
use crate::scenes::io::load_dataset;
use crate::scenes::{render, SceneGenerator, StereoSample};

pub use adam::{AdamState, StepOutcome};
pub use augment::{augment, center_crop, flip_pair, AugmentConfig};
pub use objective::{MaskMode, Objective, ObjectiveParts};
pub use train::{
    dataset_loss, train, train_step1, train_step2_mom, EpochRecord, TrainOutcome, BEST_DIR,
    CONFIG_FILE, FINAL_DIR, LOG_FILE,
};

/// Piecewise-constant learning rate halved at each listed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    /// Zero-based epochs from which the rate is halved once more.
    #[serde(default)]
    pub halve_at: Vec<usize>,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let halvings = self.halve_at.iter().filter(|&&e| e <= epoch).count();
        self.initial * 0.5f64.powi(halvings as i32)
    }
}

/// Weights used to start step 2.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Continue from the fixed step-1 network.
    #[default]
    FineTune,
    /// Fresh weights from the run seed.
    Scratch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// A folder written by `make-data`, or any folder with `dataset.toml`.
    Dataset {
        root: PathBuf,
        split: Option<PathBuf>,
    },
    /// Scenes rendered in memory with seeds `seed, seed + 1, …`.
    Synthetic {
        generator: SceneGenerator,
        count: usize,
        seed: u64,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<Vec<StereoSample>> {
        match self {
            DataSource::Dataset { root, split } => load_dataset(root, split.as_deref()),
            DataSource::Synthetic {
                generator,
                count,
                seed,
            } => (0..*count as u64)
                .map(|i| render(&generator.generate(seed.wrapping_add(i))?))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub step: TrainStep,
    pub epochs: usize,
    /// Samples per batch, half left-input and half right-input passes over
    /// the same pairs. Must be even.
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    /// Cap on iterations per epoch; one pass over the data when absent.
    #[serde(default)]
    pub iterations_per_epoch: Option<usize>,
    #[serde(default)]
    pub masks: MaskMode,
    #[serde(default)]
    pub init: InitMode,
    pub augment: AugmentConfig,
    pub loss: LossWeights,
    pub levels: LevelConfig,
    pub network: NetworkConfig,
    pub data: DataSource,
}

impl TrainConfig {
    /// Full-size reference values: batch 8, 49 levels, six-stage network,
    /// 50 epochs at 1e-4 for step 1 and 20 epochs at 5e-5 for step 2.
    pub fn reference(step: TrainStep, data: DataSource) -> Self {
        let levels = LevelConfig {
            count: 49,
            d_min: 2.0,
            d_max: 300.0,
            mode: QuantMode::Exponential,
        };
        let (epochs, lr) = match step {
            TrainStep::One => (
                50,
                LrSchedule {
                    initial: 1e-4,
                    halve_at: vec![30, 40],
                },
            ),
            TrainStep::Two => (
                20,
                LrSchedule {
                    initial: 5e-5,
                    halve_at: vec![10],
                },
            ),
        };
        Self {
            step,
            epochs,
            batch_size: 8,
            lr,
            seed: 1,
            iterations_per_epoch: None,
            masks: MaskMode::Mom,
            init: InitMode::FineTune,
            augment: AugmentConfig::reference(),
            loss: LossWeights::for_step(step).with_perceptual(),
            network: NetworkConfig::paperlike(levels.count),
            levels,
            data,
        }
    }

    /// Single-CPU scale: 96×320 synthetic scenes, 17 levels, toy network.
    pub fn desk(step: TrainStep) -> Self {
        let levels = LevelConfig {
            count: 17,
            d_min: 1.0,
            d_max: 32.0,
            mode: QuantMode::Exponential,
        };
        let (epochs, lr) = match step {
            TrainStep::One => (
                30,
                LrSchedule {
                    initial: 2e-4,
                    halve_at: vec![20],
                },
            ),
            TrainStep::Two => (
                10,
                LrSchedule {
                    initial: 1e-4,
                    halve_at: vec![5],
                },
            ),
        };
        Self {
            step,
            epochs,
            batch_size: 8,
            lr,
            seed: 1,
            iterations_per_epoch: None,
            masks: MaskMode::Mom,
            init: InitMode::FineTune,
            augment: AugmentConfig {
                scale: [1.0, 1.25],
                crop: [96, 320],
                flip_probability: 0.5,
                gamma: [0.8, 1.2],
                brightness: [0.8, 1.2],
                color: [0.95, 1.05],
            },
            loss: LossWeights::for_step(step),
            network: NetworkConfig::toy(levels.count),
            levels,
            data: DataSource::Synthetic {
                generator: SceneGenerator::desk(96, 320),
                count: 200,
                seed: 1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let op = "TrainConfig";
        if self.loss.step != self.step {
            return Err(invalid(op, "loss.step must match step"));
        }
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(invalid(
                op,
                format!("batch_size must be even and >= 2, got {}", self.batch_size),
            ));
        }
        if self.epochs == 0 {
            return Err(invalid(op, "epochs must be positive"));
        }
        if !(self.lr.initial > 0.0 && self.lr.initial.is_finite()) {
            return Err(invalid(op, "lr.initial must be positive"));
        }
        if self.network.levels != self.levels.count {
            return Err(invalid(
                op,
                format!(
                    "network.levels = {} but levels.count = {}",
                    self.network.levels, self.levels.count
                ),
            ));
        }
        self.network.validate()?;
        self.augment.validate()?;
        let [h, w] = self.augment.crop;
        self.network.check_input(h, w)?;
        self.levels.build()?;
        Ok(())
    }

    pub fn pairs_per_batch(&self) -> usize {
        self.batch_size / 2
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        cfg.validate().map_err(|e| Error::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| invalid("TrainConfig", e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves_at_configured_epochs() {
        let s = LrSchedule {
            initial: 1e-4,
            halve_at: vec![30, 40],
        };
        assert_eq!(s.at(0), 1e-4);
        assert_eq!(s.at(29), 1e-4);
        assert_eq!(s.at(30), 5e-5);
        assert_eq!(s.at(39), 5e-5);
        assert_eq!(s.at(40), 2.5e-5);
        assert_eq!(s.at(49), 2.5e-5);
    }

    #[test]
    fn presets_validate_and_round_trip() {
        for step in [TrainStep::One, TrainStep::Two] {
            let cfg = TrainConfig::desk(step);
            cfg.validate().unwrap();
            let back: TrainConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
            let full = TrainConfig::reference(step, cfg.data.clone());
            full.validate().unwrap();
            assert_eq!(full.batch_size, 8);
        }
        assert_eq!(
            TrainConfig::reference(TrainStep::One, TrainConfig::desk(TrainStep::One).data)
                .lr
                .halve_at,
            [30, 40]
        );
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut text = TrainConfig::desk(TrainStep::One).to_toml().unwrap();
        text = text.replacen("epochs =", "epoch_count = 3\nepochs =", 1);
        let err = toml::from_str::<TrainConfig>(&text).unwrap_err();
        assert!(err.to_string().contains("epoch_count"), "{err}");
    }

    #[test]
    fn odd_batch_is_rejected() {
        let mut cfg = TrainConfig::desk(TrainStep::One);
        cfg.batch_size = 3;
        assert!(cfg.validate().is_err());
    }
}
