//! Experiment and job specifications: JSON files validated against the
//! schema shipped in `schema/experiment-spec.schema.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qwb_core::attack::{
    AutoAttackConfig, BoundaryConfig, CwConfig, DeepFoolConfig, EadConfig, FgsmConfig,
    GeodaConfig, JsmaConfig, PgdConfig, SquareConfig, ZooConfig,
};
use qwb_core::defense::{
    DistillationConfig, EnsembleAdvTrainConfig, FeatureSqueezeConfig, PgdAdvTrainConfig,
    SinkhornAdvTrainConfig,
};
use qwb_core::error::{Error, Result};
use qwb_core::model::dataset::{load_cifar10_bin, synthetic_blobs, synthetic_shapes, Split};
use qwb_core::model::{Dataset, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BitWidth {
    Float32,
    Int16,
    Int8,
}

impl BitWidth {
    pub fn label(&self) -> &'static str {
        match self {
            BitWidth::Float32 => "float32",
            BitWidth::Int16 => "int16",
            BitWidth::Int8 => "int8",
        }
    }

    pub fn bits(&self) -> Option<u8> {
        match self {
            BitWidth::Float32 => None,
            BitWidth::Int16 => Some(16),
            BitWidth::Int8 => Some(8),
        }
    }
}

/// Attacker knowledge tier of each attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    White,
    Gray,
    Black,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "kebab-case")]
pub enum AttackSpec {
    Fgsm(#[serde(default)] FgsmConfig),
    Deepfool(#[serde(default)] DeepFoolConfig),
    Jsma(#[serde(default)] JsmaConfig),
    CwL2(#[serde(default)] CwConfig),
    CwLinf(#[serde(default)] CwConfig),
    Pgd(#[serde(default)] PgdConfig),
    Ead(#[serde(default)] EadConfig),
    Autoattack(#[serde(default)] AutoAttackConfig),
    Zoo(#[serde(default)] ZooConfig),
    SquareL2(#[serde(default)] SquareConfig),
    SquareLinf(#[serde(default)] SquareConfig),
    Boundary(#[serde(default)] BoundaryConfig),
    Geoda(#[serde(default)] GeodaConfig),
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::Fgsm(_) => "fgsm",
            AttackSpec::Deepfool(_) => "deepfool",
            AttackSpec::Jsma(_) => "jsma",
            AttackSpec::CwL2(_) => "cw-l2",
            AttackSpec::CwLinf(_) => "cw-linf",
            AttackSpec::Pgd(_) => "pgd",
            AttackSpec::Ead(_) => "ead",
            AttackSpec::Autoattack(_) => "autoattack",
            AttackSpec::Zoo(_) => "zoo",
            AttackSpec::SquareL2(_) => "square-l2",
            AttackSpec::SquareLinf(_) => "square-linf",
            AttackSpec::Boundary(_) => "boundary",
            AttackSpec::Geoda(_) => "geoda",
        }
    }

    pub fn tier(&self) -> Tier {
        match self {
            AttackSpec::Fgsm(_)
            | AttackSpec::Deepfool(_)
            | AttackSpec::Jsma(_)
            | AttackSpec::CwL2(_)
            | AttackSpec::CwLinf(_)
            | AttackSpec::Pgd(_)
            | AttackSpec::Ead(_)
            | AttackSpec::Autoattack(_) => Tier::White,
            AttackSpec::Zoo(_) | AttackSpec::SquareL2(_) | AttackSpec::SquareLinf(_) => Tier::Gray,
            AttackSpec::Boundary(_) | AttackSpec::Geoda(_) => Tier::Black,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "kebab-case")]
pub enum DefenseSpec {
    Distillation(#[serde(default)] DistillationConfig),
    PgdAdvTrain(#[serde(default)] PgdAdvTrainConfig),
    EnsembleAdvTrain(#[serde(default)] EnsembleAdvTrainConfig),
    SinkhornAdvTrain(#[serde(default)] SinkhornAdvTrainConfig),
    FeatureSqueezing(#[serde(default)] FeatureSqueezeConfig),
}

impl DefenseSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DefenseSpec::Distillation(_) => "distillation",
            DefenseSpec::PgdAdvTrain(_) => "pgd-adv-train",
            DefenseSpec::EnsembleAdvTrain(_) => "ensemble-adv-train",
            DefenseSpec::SinkhornAdvTrain(_) => "sinkhorn-adv-train",
            DefenseSpec::FeatureSqueezing(_) => "feature-squeezing",
        }
    }

    pub fn is_train_based(&self) -> bool {
        !matches!(self, DefenseSpec::FeatureSqueezing(_))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    SyntheticShapes {
        classes: usize,
        size: usize,
        channels: usize,
        #[serde(default = "default_noise")]
        noise: f32,
        #[serde(default)]
        seed: u64,
    },
    SyntheticBlobs {
        classes: usize,
        size: usize,
        channels: usize,
        #[serde(default)]
        seed: u64,
    },
    Cifar10 {
        path: PathBuf,
    },
}

fn default_noise() -> f32 {
    0.06
}

impl DatasetSpec {
    /// Materialize one split. Synthetic splits derive distinct streams from
    /// the base seed; CIFAR uses leading records (the caller controls counts).
    pub fn load(&self, split: Split, count: usize) -> Result<Dataset> {
        let salt = match split {
            Split::Train => 0x11,
            Split::Test => 0x22,
            Split::Calibration => 0x33,
        };
        match self {
            DatasetSpec::SyntheticShapes { classes, size, channels, noise, seed } => {
                synthetic_shapes(count, *classes, *size, *channels, *noise, seed ^ salt, split)
            }
            DatasetSpec::SyntheticBlobs { classes, size, channels, seed } => {
                synthetic_blobs(count, *classes, *size, *channels, seed ^ salt, split)
            }
            DatasetSpec::Cifar10 { path } => load_cifar10_bin(path, Some(count), split),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Direct,
    Transfer,
    DefenseEval,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticsSpec {
    pub zero_density: bool,
    pub cosine_similarity: bool,
    pub boundary_distance: bool,
    /// Finite-difference step for zero-density probing.
    pub h: f32,
    /// Samples used by each diagnostic.
    pub samples: usize,
}

impl Default for DiagnosticsSpec {
    fn default() -> Self {
        DiagnosticsSpec {
            zero_density: false,
            cosine_similarity: false,
            boundary_distance: false,
            h: 1e-4,
            samples: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoCalibrateSpec {
    pub enabled: bool,
    /// Strength doublings allowed before giving up.
    pub max_doublings: u32,
}

impl Default for AutoCalibrateSpec {
    fn default() -> Self {
        AutoCalibrateSpec { enabled: false, max_doublings: 6 }
    }
}

/// Declarative description of one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub protocol: Protocol,
    /// Path to a trained float model container.
    pub model: PathBuf,
    pub bit_widths: Vec<BitWidth>,
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub defense: Option<DefenseSpec>,
    pub dataset: DatasetSpec,
    /// Samples attacked per (attack, bit-width) cell.
    pub sample_count: usize,
    #[serde(default = "default_calibration_count")]
    pub calibration_count: usize,
    /// Training samples for train-based defenses.
    #[serde(default = "default_train_count")]
    pub train_count: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub diagnostics: DiagnosticsSpec,
    #[serde(default)]
    pub auto_calibrate: AutoCalibrateSpec,
    /// Opt-in: re-craft attacks against the pre-processing pipeline instead
    /// of replaying examples produced against the vanilla models.
    #[serde(default)]
    pub recraft_on_defense: bool,
}

fn default_calibration_count() -> usize {
    16
}

fn default_train_count() -> usize {
    512
}

impl ExperimentSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidSpec(format!("cannot read {}: {e}", path.display())))?;
        let spec: ExperimentSpec = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidSpec(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bit_widths.is_empty() {
            return Err(Error::InvalidSpec("bit_widths must not be empty".into()));
        }
        if self.attacks.is_empty() && self.protocol != Protocol::DefenseEval {
            return Err(Error::InvalidSpec("attacks must not be empty".into()));
        }
        if self.sample_count == 0 {
            return Err(Error::InvalidSpec("sample_count must be >= 1".into()));
        }
        let mut widths = self.bit_widths.clone();
        widths.dedup();
        if widths.len() != self.bit_widths.len() {
            return Err(Error::InvalidSpec("bit_widths contains duplicates".into()));
        }
        match self.protocol {
            Protocol::Direct => {
                for attack in &self.attacks {
                    if attack.tier() == Tier::White
                        && self.bit_widths.iter().any(|w| *w != BitWidth::Float32)
                    {
                        return Err(Error::InvalidSpec(format!(
                            "direct protocol cannot aim white-box attack '{}' at an integer model; \
                             exact gradients do not exist there",
                            attack.name()
                        )));
                    }
                }
            }
            Protocol::Transfer => {
                if !self.bit_widths.contains(&BitWidth::Float32) {
                    return Err(Error::InvalidSpec(
                        "transfer protocol requires float32 as the crafting source".into(),
                    ));
                }
            }
            Protocol::DefenseEval => {
                if self.defense.is_none() {
                    return Err(Error::InvalidSpec("defense-eval requires a defense".into()));
                }
            }
        }
        Ok(())
    }
}

/// Config for the `train` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    /// "resnet" or "dscnn".
    pub arch: String,
    pub dataset: DatasetSpec,
    pub train_count: usize,
    #[serde(default = "default_test_count")]
    pub test_count: usize,
    #[serde(default)]
    pub train: TrainConfig,
    /// Seed for parameter initialization.
    #[serde(default)]
    pub init_seed: u64,
}

fn default_test_count() -> usize {
    128
}

/// Config for the `quantize` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizeSpec {
    pub model: PathBuf,
    pub dataset: DatasetSpec,
    pub calibration_count: usize,
    pub bits: u8,
}

/// Config for the `attack` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackJobSpec {
    pub model: PathBuf,
    pub dataset: DatasetSpec,
    pub attack: AttackSpec,
    pub sample_count: usize,
    #[serde(default)]
    pub bit_width: Option<BitWidth>,
    #[serde(default = "default_calibration_count")]
    pub calibration_count: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Config for the `defend` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefendSpec {
    pub model: PathBuf,
    pub dataset: DatasetSpec,
    pub defense: DefenseSpec,
    pub train_count: usize,
    #[serde(default)]
    pub seed: u64,
}

pub fn load_json_spec<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidSpec(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidSpec(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_spec(protocol: Protocol) -> ExperimentSpec {
        ExperimentSpec {
            protocol,
            model: PathBuf::from("model.qwbm"),
            bit_widths: vec![BitWidth::Float32],
            attacks: vec![AttackSpec::SquareLinf(SquareConfig::default())],
            defense: None,
            dataset: DatasetSpec::SyntheticShapes {
                classes: 10,
                size: 16,
                channels: 3,
                noise: 0.06,
                seed: 0,
            },
            sample_count: 10,
            calibration_count: 8,
            train_count: 64,
            seed: 0,
            diagnostics: DiagnosticsSpec::default(),
            auto_calibrate: AutoCalibrateSpec::default(),
            recraft_on_defense: false,
        }
    }

    #[test]
    fn white_box_direct_on_integer_rejected() {
        let mut spec = minimal_spec(Protocol::Direct);
        spec.bit_widths = vec![BitWidth::Int8];
        spec.attacks = vec![AttackSpec::Deepfool(DeepFoolConfig::default())];
        assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn transfer_requires_float_source() {
        let mut spec = minimal_spec(Protocol::Transfer);
        spec.bit_widths = vec![BitWidth::Int8, BitWidth::Int16];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn defense_eval_requires_defense() {
        let spec = minimal_spec(Protocol::DefenseEval);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn direct_gray_box_on_integer_is_fine() {
        let mut spec = minimal_spec(Protocol::Direct);
        spec.bit_widths = vec![BitWidth::Float32, BitWidth::Int16, BitWidth::Int8];
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn attack_tiers() {
        assert_eq!(AttackSpec::Deepfool(DeepFoolConfig::default()).tier(), Tier::White);
        assert_eq!(AttackSpec::Zoo(ZooConfig::default()).tier(), Tier::Gray);
        assert_eq!(AttackSpec::Boundary(BoundaryConfig::default()).tier(), Tier::Black);
    }
}
