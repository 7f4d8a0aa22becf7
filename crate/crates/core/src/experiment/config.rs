//! Experiment configuration. Every field has a default, so `{}` is a valid
//! config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ctta::{AdamConfig, RegTarget, StrategyMode};
use crate::data::{Recipe, StreamSpec};
use crate::data::default_recipe;
use crate::engine::{BnMode, Precision};
use crate::error::{Error, Result};
use crate::nn::ReferenceCnnConfig;
use crate::rng;
use crate::warmup::{GradNormKind, Metric};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_samples: usize,
    pub val_samples: usize,
    pub classes: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train_samples: 6000,
            val_samples: 1000,
            classes: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Clean validation accuracy below this aborts pretraining.
    pub min_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 4,
            lr: 1e-3,
            batch_size: 32,
            min_accuracy: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupSettings {
    pub recipe: Recipe,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub norm: GradNormKind,
    pub keep_weights: bool,
    pub metric: Metric,
    pub alpha: f64,
}

impl Default for WarmupSettings {
    fn default() -> Self {
        WarmupSettings {
            recipe: default_recipe(),
            epochs: 1,
            lr: 0.00025,
            batch_size: 32,
            norm: GradNormKind::L2,
            keep_weights: false,
            metric: Metric::GradNorm,
            alpha: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSettings {
    pub mode: StrategyMode,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    /// `H0 = h0_factor · ln C`.
    pub h0_factor: f64,
    pub bn_mode: BnMode,
    pub reg_target: RegTarget,
    pub tent_filtered: bool,
    pub precision: Precision,
    pub stream: StreamSpec,
}

impl Default for AdaptSettings {
    fn default() -> Self {
        AdaptSettings {
            mode: StrategyMode::Focta,
            batch_size: 16,
            lr: 1e-3,
            lambda: 1.0,
            h0_factor: 0.4,
            bn_mode: BnMode::UseBatchStats,
            reg_target: RegTarget::Features,
            tent_filtered: false,
            precision: Precision::F32,
            stream: StreamSpec::all_kinds(5, 1000),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub batch_sizes: Vec<usize>,
    pub modes: Vec<StrategyMode>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            batch_sizes: vec![64, 32, 16, 8, 4],
            modes: vec![StrategyMode::Focta, StrategyMode::TentAllBn],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every random stream is derived from it by purpose.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ReferenceCnnConfig,
    pub pretrain: PretrainConfig,
    pub warmup: WarmupSettings,
    pub adapt: AdaptSettings,
    pub sweep: SweepSettings,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            dataset: DatasetConfig::default(),
            model: ReferenceCnnConfig::default(),
            pretrain: PretrainConfig::default(),
            warmup: WarmupSettings::default(),
            adapt: AdaptSettings::default(),
            sweep: SweepSettings::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.classes != self.model.classes {
            return Err(Error::Config(format!(
                "dataset has {} classes but the model head has {}",
                d.classes, self.model.classes
            )));
        }
        if !(2..=crate::data::shapes::MAX_CLASSES).contains(&d.classes) {
            return Err(Error::Config(format!("classes must be in 2..=10, got {}", d.classes)));
        }
        let floor = d.classes * crate::data::shapes::MIN_PER_CLASS;
        if d.train_samples < floor || d.val_samples < floor {
            return Err(Error::Config(format!("train and validation sets need >= {floor} samples")));
        }
        if self.model.input_size != crate::data::IMAGE_SIZE || self.model.in_channels != 1 {
            return Err(Error::Config("the shape dataset is 1×16×16".into()));
        }
        self.model.validate()?;
        let p = &self.pretrain;
        if p.epochs == 0 || p.batch_size == 0 || !(0.0..=1.0).contains(&p.min_accuracy) {
            return Err(Error::Config("pretrain needs epochs, batch size >= 1 and min_accuracy in [0, 1]".into()));
        }
        AdamConfig::with_lr(p.lr).validate()?;
        let w = &self.warmup;
        crate::warmup::layer_budget(w.alpha, 1)?;
        if w.epochs == 0 || w.batch_size == 0 {
            return Err(Error::Config("warm-up epochs and batch size must be >= 1".into()));
        }
        AdamConfig::with_lr(w.lr).validate()?;
        let a = &self.adapt;
        if a.batch_size == 0 || !(a.h0_factor > 0.0) || !(a.lambda >= 0.0) {
            return Err(Error::Config("adapt needs batch size >= 1, h0_factor > 0 and lambda >= 0".into()));
        }
        AdamConfig::with_lr(a.lr).validate()?;
        a.stream.validate()?;
        if self.sweep.batch_sizes.contains(&0) {
            return Err(Error::Config("sweep batch sizes must be >= 1".into()));
        }
        Ok(())
    }

    /// Seed for one purpose, derived from the root seed.
    pub fn seed_for(&self, purpose: &str) -> u64 {
        rng::derive_seed(self.seed, purpose)
    }

    /// sha256 of the canonical JSON encoding.
    /// Content hash of everything except `out_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Artifact(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_is_the_default() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn defaults_carry_published_hyperparameters() {
        let c = ExperimentConfig::default();
        assert_eq!(c.warmup.lr, 0.00025);
        assert_eq!(c.warmup.epochs, 1);
        assert_eq!(c.warmup.alpha, 0.1);
        assert_eq!(c.adapt.lambda, 1.0);
        assert_eq!(c.adapt.h0_factor, 0.4);
        assert_eq!(c.adapt.lr, 0.001);
        assert_eq!(c.sweep.batch_sizes, vec![64, 32, 16, 8, 4]);
    }

    #[test]
    fn zero_classes_is_rejected() {
        let mut c = ExperimentConfig::default();
        c.dataset.classes = 0;
        c.model.classes = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 3}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), c.hash());
    }
}
