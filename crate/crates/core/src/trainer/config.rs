use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::network::{ArchSpec, BankSharing, BitWidthSet, LayerSpec};
use crate::optim::{Sgd, StepSchedule};

pub const SCHEMA_VERSION: u32 = 1;

/// Training procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Teacher selection, block swapping and distillation across all of `B`.
    Coquant,
    /// Sum of per-precision losses, one batch-norm and clip set for all.
    Joint,
    /// Sum of per-precision losses, per-precision batch norm, shared clips.
    SwitchableBn,
    /// Sum of per-precision losses, per-precision batch norm and clips.
    Adabits,
    /// Only the given bit-width, which must be the whole of `B`.
    Individual(u8),
    /// One phase per bit-width from `b1` down.
    ProgressiveDesc,
    /// One phase per bit-width from the lowest up.
    ProgressiveAsc,
    /// Train only the given bit-width; every other `b ∈ B` is executed directly
    /// with the same batch norm and clips.
    Direct(u8),
}

impl Mode {
    pub fn sharing(self) -> BankSharing {
        match self {
            Mode::Joint | Mode::Direct(_) => BankSharing::Shared,
            Mode::SwitchableBn => BankSharing::SharedClip,
            _ => BankSharing::PerPrecision,
        }
    }

    pub fn distills(self) -> bool {
        self == Mode::Coquant
    }

    pub fn phases(self, bits: &BitWidthSet) -> usize {
        match self {
            Mode::ProgressiveDesc | Mode::ProgressiveAsc => bits.len(),
            _ => 1,
        }
    }

    /// Bit-widths trained during `phase`, highest first.
    pub fn phase_bits(self, bits: &BitWidthSet, phase: usize) -> Vec<u8> {
        match self {
            Mode::Individual(b) | Mode::Direct(b) => vec![b],
            Mode::ProgressiveDesc => vec![bits.as_slice()[phase]],
            Mode::ProgressiveAsc => vec![bits.as_slice()[bits.len() - 1 - phase]],
            _ => bits.as_slice().to_vec(),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Coquant => f.write_str("coquant"),
            Mode::Joint => f.write_str("joint"),
            Mode::SwitchableBn => f.write_str("switchable_bn"),
            Mode::Adabits => f.write_str("adabits"),
            Mode::Individual(b) => write!(f, "individual:{b}"),
            Mode::ProgressiveDesc => f.write_str("progressive_desc"),
            Mode::ProgressiveAsc => f.write_str("progressive_asc"),
            Mode::Direct(b) => write!(f, "direct:{b}"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = |v: &str| {
            v.parse::<u8>()
                .map_err(|_| Error::Config(format!("mode {s:?}: {v:?} is not a bit-width")))
        };
        Ok(match s.split_once(':') {
            Some(("individual", b)) => Mode::Individual(bits(b)?),
            Some(("direct", b)) => Mode::Direct(bits(b)?),
            None => match s {
                "coquant" => Mode::Coquant,
                "joint" => Mode::Joint,
                "switchable_bn" => Mode::SwitchableBn,
                "adabits" => Mode::Adabits,
                "progressive_desc" => Mode::ProgressiveDesc,
                "progressive_asc" => Mode::ProgressiveAsc,
                _ => return Err(Error::Config(format!("unknown mode {s:?}"))),
            },
            _ => return Err(Error::Config(format!("unknown mode {s:?}"))),
        })
    }
}

impl Serialize for Mode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: StepSchedule,
}

fn default_momentum() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaConfig {
    #[serde(default = "default_alpha_init")]
    pub init: f64,
    #[serde(default = "default_alpha_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_alpha_init() -> f64 {
    6.0
}

fn default_alpha_lr() -> f64 {
    0.01
}

impl Default for AlphaConfig {
    fn default() -> Self {
        Self {
            init: default_alpha_init(),
            lr: default_alpha_lr(),
            weight_decay: 0.0,
        }
    }
}

/// Network layout; input shape and class count come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Dense layers of the given widths; inputs of rank > 1 are flattened.
    Mlp { hidden: Vec<usize> },
    /// Three-convolution network for `[C, H, W]` inputs.
    SmallCnn,
    /// Explicit layer list.
    Layers { layers: Vec<LayerSpec> },
}

impl ModelSpec {
    pub fn arch(&self, sample_shape: &[usize], classes: usize) -> Result<ArchSpec> {
        let arch = match self {
            ModelSpec::Mlp { hidden } => {
                let inputs: usize = sample_shape.iter().product();
                let mut a = ArchSpec::mlp(inputs, hidden, classes);
                if sample_shape.len() > 1 {
                    a.layers.insert(0, LayerSpec::Flatten);
                    a.input_shape = sample_shape.to_vec();
                }
                a
            }
            ModelSpec::SmallCnn => {
                let [c, h, w] = sample_shape else {
                    return Err(Error::Config(format!(
                        "small_cnn needs [C, H, W] samples, got {sample_shape:?}"
                    )));
                };
                ArchSpec::small_cnn(*c, *h, *w, classes)
            }
            ModelSpec::Layers { layers } => ArchSpec {
                input_shape: sample_shape.to_vec(),
                classes,
                layers: layers.clone(),
            },
        };
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DatasetSpec,
    pub test: DatasetSpec,
}

/// Every parameter of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub mode: Mode,
    pub bits: BitWidthSet,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_p1")]
    pub p1_initial: f64,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub alpha: AlphaConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub deterministic: bool,
    pub model: ModelSpec,
    pub data: DataConfig,
    /// Bit-widths outside `bits` to calibrate and evaluate after training.
    #[serde(default)]
    pub zero_shot_bits: Vec<u8>,
    /// Where checkpoints, metrics and the summary go; nothing is written when absent.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_lambda() -> f64 {
    0.1
}

fn default_p1() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        match self.mode {
            Mode::Individual(b) if self.bits.as_slice() != [b] => {
                return Err(Error::Config(format!(
                    "individual:{b} requires bits = [{b}], got {:?}",
                    self.bits.as_slice()
                )))
            }
            Mode::Direct(b) if !self.bits.contains(b) => {
                return Err(Error::Config(format!(
                    "direct:{b} source must be in bits {:?}",
                    self.bits.as_slice()
                )))
            }
            _ => {}
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be ≥ 0, got {}",
                self.lambda
            )));
        }
        if !(self.p1_initial > 0.0 && self.p1_initial <= 1.0) {
            return Err(Error::Config(format!(
                "p1_initial must be in (0, 1], got {}",
                self.p1_initial
            )));
        }
        self.weight_sgd().validate()?;
        self.alpha_sgd().validate()?;
        self.optimizer.schedule.validate()?;
        if !(self.alpha.init.is_finite() && self.alpha.init > 0.0) {
            return Err(Error::Config(format!(
                "alpha init must be > 0, got {}",
                self.alpha.init
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        for &b in &self.zero_shot_bits {
            if b < 2 || b > self.bits.b1() || self.bits.contains(b) {
                return Err(Error::Config(format!(
                    "zero-shot bit-width {b} must lie in [2, {}] and outside bits",
                    self.bits.b1()
                )));
            }
        }
        Ok(())
    }

    /// Optimizer for latent weights.
    pub fn weight_sgd(&self) -> Sgd {
        Sgd {
            lr: self.optimizer.lr,
            momentum: self.optimizer.momentum,
            weight_decay: self.optimizer.weight_decay,
        }
    }

    /// Optimizer for biases and batch-norm affine parameters.
    pub fn affine_sgd(&self) -> Sgd {
        Sgd {
            weight_decay: 0.0,
            ..self.weight_sgd()
        }
    }

    /// Optimizer for clip values.
    pub fn alpha_sgd(&self) -> Sgd {
        Sgd {
            lr: self.alpha.lr,
            momentum: self.optimizer.momentum,
            weight_decay: self.alpha.weight_decay,
        }
    }
}
