//! Experiment configuration: a flat key-value TOML document with a
//! versioned schema. Unknown keys are rejected so a mistyped
//! hyperparameter fails loudly instead of silently using a default.

use crate::error::{CliError, Result};
use pclab_core::tensor::Real;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    /// Backprop baseline (no relaxation).
    Bp,
    /// Standard predictive coding, uniform precisions.
    Pc,
    /// Decaying precisions.
    PcD,
    /// Spiking precisions.
    PcS,
    /// Forward updates, uniform precisions.
    PcF,
    /// Decaying precisions + forward updates.
    PcDf,
    /// Spiking precisions + forward updates.
    PcSf,
}

impl Algo {
    pub fn parse(s: &str) -> Result<Algo> {
        Ok(match s {
            "bp" => Algo::Bp,
            "pc" => Algo::Pc,
            "pc-d" => Algo::PcD,
            "pc-s" => Algo::PcS,
            "pc-f" => Algo::PcF,
            "pc-df" => Algo::PcDf,
            "pc-sf" => Algo::PcSf,
            other => return Err(CliError::Config(format!("unknown algo {other:?}"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Algo::Bp => "bp",
            Algo::Pc => "pc",
            Algo::PcD => "pc-d",
            Algo::PcS => "pc-s",
            Algo::PcF => "pc-f",
            Algo::PcDf => "pc-df",
            Algo::PcSf => "pc-sf",
        }
    }

    pub fn uses_relaxation(&self) -> bool {
        !matches!(self, Algo::Bp)
    }

    pub fn forward_updates(&self) -> bool {
        matches!(self, Algo::PcF | Algo::PcDf | Algo::PcSf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    /// Running statistics update on every training-mode pass.
    Standard,
    /// Frozen during relaxation, updated once per learning phase.
    Freeze,
    /// Strip batch norm from the architecture.
    Off,
}

impl BnMode {
    pub fn parse(s: &str) -> Result<BnMode> {
        Ok(match s {
            "standard" => BnMode::Standard,
            "freeze" => BnMode::Freeze,
            "off" => BnMode::Off,
            other => return Err(CliError::Config(format!("unknown bn mode {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<DatasetKind> {
        Ok(match s {
            "mnist" => DatasetKind::Mnist,
            "cifar10" => DatasetKind::Cifar10,
            other => return Err(CliError::Config(format!("unknown dataset {other:?}"))),
        })
    }
}

/// One experiment, fully determined (together with the seed) .
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Architecture preset: `mlp-<D>`, `vgg5-narrow`, `vgg5`, `vgg7`,
    /// `vgg10`, `vgg15`.
    pub arch: String,
    pub dataset: DatasetKind,
    /// Directory holding the dataset files; empty means `data/<dataset>`.
    pub data_dir: String,
    /// Use only the first `subset / classes` examples of every class of
    /// the training split (0 = all).
    pub subset: usize,
    pub algo: Algo,
    pub bn: BnMode,
    /// Hidden-layer activation: relu, leaky-relu, gelu, hard-tanh.
    pub activation: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Relaxation steps; 0 means the network depth L.
    pub t_steps: usize,
    pub lr_x: Real,
    pub momentum_x: Real,
    /// Decay the last hidden node's activity rate as lr_x^t.
    pub last_layer_lr_decay: bool,
    /// Decaying-precision strength k.
    pub decay_k: f64,
    /// Spiking-precision magnitude; 0 means "use lr_x".
    pub spike_alpha: f64,
    /// Enable output nudging toward the label.
    pub nudging: bool,
    pub beta: f64,
    pub center_nudging: bool,
    pub lr_w: Real,
    pub weight_decay: Real,
    pub train_bn_params: bool,
    /// Train-split augmentation: 50% horizontal flips plus zero-padded
    /// random crops when `crop_pad` > 0.
    pub augment: bool,
    pub hflip_prob: f64,
    pub crop_pad: usize,
    /// Apply the per-channel dataset normalization.
    pub normalize: bool,
    pub early_stop_patience: usize,
    /// Evaluate train-split accuracy every epoch (test is always done).
    pub eval_train: bool,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            arch: "mlp-4".into(),
            dataset: DatasetKind::Mnist,
            data_dir: String::new(),
            subset: 0,
            algo: Algo::Pc,
            bn: BnMode::Freeze,
            activation: "relu".into(),
            seed: 0,
            epochs: 25,
            batch_size: 128,
            t_steps: 0,
            lr_x: 0.05,
            momentum_x: 0.0,
            last_layer_lr_decay: false,
            decay_k: 1.5,
            spike_alpha: 0.0,
            nudging: false,
            beta: 0.15,
            center_nudging: false,
            lr_w: 1e-3,
            weight_decay: 1e-5,
            train_bn_params: true,
            augment: false,
            hflip_prob: 0.5,
            crop_pad: 0,
            normalize: true,
            early_stop_patience: 10,
            eval_train: true,
            out_dir: String::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} unsupported (this build reads {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        crate::presets::parse_arch(&self.arch)?;
        crate::presets::parse_activation(&self.activation)?;
        if self.epochs == 0 {
            return Err(CliError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(CliError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr_w > 0.0) {
            return Err(CliError::Config(format!("lr_w must be > 0, got {}", self.lr_w)));
        }
        if !(self.lr_x >= 0.0) {
            return Err(CliError::Config(format!("lr_x must be >= 0, got {}", self.lr_x)));
        }
        if !(0.0..1.0).contains(&self.momentum_x) {
            return Err(CliError::Config(format!(
                "momentum_x must be in [0,1), got {}",
                self.momentum_x
            )));
        }
        if matches!(self.algo, Algo::PcD | Algo::PcDf) && !(self.decay_k > 0.0) {
            return Err(CliError::Config(format!("decay_k must be > 0, got {}", self.decay_k)));
        }
        if matches!(self.algo, Algo::PcS | Algo::PcSf) {
            let alpha = self.effective_spike_alpha();
            if !(alpha > 0.0) {
                return Err(CliError::Config(format!(
                    "spiking precision needs a positive spike (lr_x or spike_alpha), got {alpha}"
                )));
            }
        }
        if self.nudging && !(0.0..=1.0).contains(&self.beta.abs()) {
            return Err(CliError::Config(format!("|beta| must be <= 1, got {}", self.beta)));
        }
        Ok(())
    }

    /// The spike magnitude: configured value, defaulting to lr_x ("a spike
    /// proportional to the learning rate").
    pub fn effective_spike_alpha(&self) -> f64 {
        if self.spike_alpha > 0.0 {
            self.spike_alpha
        } else {
            self.lr_x as f64
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        if self.data_dir.is_empty() {
            match self.dataset {
                DatasetKind::Mnist => PathBuf::from("data/mnist"),
                DatasetKind::Cifar10 => PathBuf::from("data/cifar10"),
            }
        } else {
            PathBuf::from(&self.data_dir)
        }
    }

    /// Per-channel normalization constants for the dataset.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        match self.dataset {
            // MNIST mean/std of the training split.
            DatasetKind::Mnist => (vec![0.1307], vec![0.3081]),
            DatasetKind::Cifar10 => (
                vec![0.4914, 0.4822, 0.4465],
                vec![0.2023, 0.1994, 0.2010],
            ),
        }
    }
}
