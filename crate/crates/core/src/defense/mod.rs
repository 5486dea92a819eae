//! Defenses: four train-based hardeners producing float models that remain
//! quantizable, and feature squeezing as an input pre-processing stage.

mod advtrain;
mod distill;
mod sinkhorn;
mod squeeze;

pub use advtrain::{
    ensemble_adversarial_train, pgd_adversarial_train, sinkhorn_adversarial_train, EnsemblePoolStats,
};
pub use distill::distill_train;
pub use sinkhorn::{sinkhorn_divergence, sinkhorn_divergence_with_grads, PointCloud};
pub use squeeze::{adjust_window, feature_squeeze, squeeze_detect, SqueezeDetection};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillationConfig {
    pub temperature: f32,
    /// Weight of the hard-label term in the student loss.
    pub alpha: f32,
    pub train: TrainConfig,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        DistillationConfig { temperature: 20.0, alpha: 0.1, train: TrainConfig::default() }
    }
}

impl DistillationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature < 1.0 {
            return Err(Error::invalid_argument("distillation temperature must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid_argument("distillation alpha must be in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PgdAdvTrainConfig {
    pub eps: f32,
    pub step: f32,
    pub iters: usize,
    pub train: TrainConfig,
}

impl Default for PgdAdvTrainConfig {
    fn default() -> Self {
        PgdAdvTrainConfig {
            eps: 0.008,
            step: 0.0008,
            iters: 10,
            train: TrainConfig { epochs: 50, ..TrainConfig::default() },
        }
    }
}

impl PgdAdvTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step > self.eps {
            return Err(Error::invalid_argument("adversarial-training step must be <= eps"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleAdvTrainConfig {
    pub pgd: PgdAdvTrainConfig,
    pub fgsm_eps: f32,
    pub train: TrainConfig,
}

impl Default for EnsembleAdvTrainConfig {
    fn default() -> Self {
        EnsembleAdvTrainConfig {
            pgd: PgdAdvTrainConfig::default(),
            fgsm_eps: 0.008,
            train: TrainConfig { epochs: 50, ..TrainConfig::default() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SinkhornReduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornAdvTrainConfig {
    pub pgd: PgdAdvTrainConfig,
    pub sink_eps: f64,
    pub sink_iters: usize,
    pub reduction: SinkhornReduction,
    /// Weight of the divergence term; zero reduces the defense to plain PGD
    /// adversarial training, bit for bit.
    pub weight: f32,
}

impl Default for SinkhornAdvTrainConfig {
    fn default() -> Self {
        SinkhornAdvTrainConfig {
            pgd: PgdAdvTrainConfig::default(),
            sink_eps: 1.0,
            sink_iters: 50,
            reduction: SinkhornReduction::Sum,
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSqueezeConfig {
    pub bit_depth: u8,
    pub window: usize,
    pub detect_threshold: f32,
}

impl Default for FeatureSqueezeConfig {
    fn default() -> Self {
        // Published window sizes 2 and 6 are even; median filters need odd
        // windows, so ingestion adjusts them (2 -> 3, 6 -> 5).
        FeatureSqueezeConfig { bit_depth: 4, window: 3, detect_threshold: 0.3 }
    }
}

impl FeatureSqueezeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.bit_depth) {
            return Err(Error::invalid_argument("bit depth must be in [1, 8]"));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::invalid_argument("median window must be odd and >= 1"));
        }
        Ok(())
    }
}

/// FNV-1a over the canonical JSON of a config, recorded in hardened-model
/// provenance blocks.
pub fn config_hash<T: Serialize>(cfg: &T) -> u64 {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}
