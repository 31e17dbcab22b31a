//! Training: shared configuration, per-step history, and the three loops.

pub mod cyclegan;
pub mod pix2pix;
pub mod vae;

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Result, TensorError};
use crate::nn::bundle::{ModelBundle, ModelKind};
use crate::nn::{PatchGanConfig, UNetConfig, VaeConfig};

pub use cyclegan::train_cyclegan;
pub use pix2pix::train_pix2pix;
pub use vae::train_vae;

/// Wall-clock source for history records. The core never reads a clock
/// itself; under the deterministic flag the recorded time is always zero
/// so histories and artifacts stay byte-identical across runs.
pub trait Clock {
    fn elapsed_secs(&self) -> f64;
}

/// Clock that always reads zero.
pub struct NullClock;

impl Clock for NullClock {
    fn elapsed_secs(&self) -> f64 {
        0.0
    }
}

/// Every knob of the three training loops.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Pixel reconstruction weight in the conditional GAN objective.
    pub lambda_l1: f64,
    /// Cycle-consistency weight.
    pub lambda_cyc: f64,
    /// Identity-mapping weight.
    pub lambda_id: f64,
    /// KL weight in the VAE objective.
    pub kl_weight: f64,
    pub image_size: usize,
    pub in_channels: usize,
    /// Width of the first conv block; deeper blocks scale ×2 up to ×8.
    pub base_width: usize,
    pub latent_dim: usize,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            kind: ModelKind::Pix2Pix,
            epochs: 30,
            batch_size: 256,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            lambda_l1: 100.0,
            lambda_cyc: 10.0,
            lambda_id: 5.0,
            kl_weight: 1.0,
            image_size: 256,
            in_channels: 3,
            base_width: 64,
            latent_dim: 128,
            seed: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(TensorError::InvalidConfig {
                what: format!("batch size must be at least 2, got {}", self.batch_size),
            });
        }
        if self.epochs == 0 {
            return Err(TensorError::InvalidConfig {
                what: String::from("epochs must be positive"),
            });
        }
        for (name, v) in [
            ("lr", self.lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("lambda_l1", self.lambda_l1),
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_id", self.lambda_id),
            ("kl_weight", self.kl_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(TensorError::InvalidConfig {
                    what: format!("{name} must be a finite non-negative number, got {v}"),
                });
            }
        }
        self.arch_check()
    }

    fn arch_check(&self) -> Result<()> {
        match self.kind {
            ModelKind::Pix2Pix | ModelKind::CycleGan => {
                self.unet_config().validate()?;
                let cond = self.kind == ModelKind::Pix2Pix;
                let d = self.patchgan_config(cond);
                d.validate()?;
                d.logit_extent(self.image_size)?;
            }
            ModelKind::Vae => self.vae_config().validate()?,
        }
        Ok(())
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig::for_size(self.image_size, self.in_channels, self.base_width)
    }

    pub fn patchgan_config(&self, conditional: bool) -> PatchGanConfig {
        let in_ch = if conditional {
            2 * self.in_channels
        } else {
            self.in_channels
        };
        PatchGanConfig::new(in_ch, self.base_width)
    }

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig::new(
            self.image_size,
            self.in_channels,
            self.latent_dim,
            self.base_width,
        )
    }

    /// Canonical `key=value` text, one pair per line, keys sorted. This is
    /// the config payload inside checkpoints and `config.resolved.txt`.
    pub fn canonical_text(&self) -> String {
        let mut pairs: Vec<(&str, String)> = alloc::vec![
            ("base_width", self.base_width.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("deterministic", (self.deterministic as u8).to_string()),
            ("epochs", self.epochs.to_string()),
            ("image_size", self.image_size.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("kl_weight", self.kl_weight.to_string()),
            ("lambda_cyc", self.lambda_cyc.to_string()),
            ("lambda_id", self.lambda_id.to_string()),
            ("lambda_l1", self.lambda_l1.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("lr", self.lr.to_string()),
            ("model", String::from(self.kind.name())),
            ("seed", self.seed.to_string()),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Parse canonical text back. Unknown keys are rejected; every known
    /// key must be present.
    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = [false; TrainConfig::KEYS.len()];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(TensorError::InvalidConfig {
                    what: format!("line {}: expected key=value, got '{line}'", lineno + 1),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            cfg.apply_kv(key, value)?;
            if let Some(idx) = TrainConfig::KEYS.iter().position(|&k| k == key) {
                seen[idx] = true;
            }
        }
        for (idx, &required) in TrainConfig::KEYS.iter().enumerate() {
            if !seen[idx] {
                return Err(TensorError::InvalidConfig {
                    what: format!("missing key '{required}'"),
                });
            }
        }
        Ok(cfg)
    }

    pub const KEYS: &'static [&'static str] = &[
        "base_width",
        "batch_size",
        "beta1",
        "beta2",
        "deterministic",
        "epochs",
        "image_size",
        "in_channels",
        "kl_weight",
        "lambda_cyc",
        "lambda_id",
        "lambda_l1",
        "latent_dim",
        "lr",
        "model",
        "seed",
    ];

    /// Apply one `key=value` pair (used by config files and checkpoints).
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn us(key: &str, value: &str) -> Result<usize> {
            value.parse().map_err(|_| TensorError::InvalidConfig {
                what: format!("{key}: expected an integer, got '{value}'"),
            })
        }
        fn fl(key: &str, value: &str) -> Result<f64> {
            value.parse().map_err(|_| TensorError::InvalidConfig {
                what: format!("{key}: expected a number, got '{value}'"),
            })
        }
        match key {
            "base_width" => self.base_width = us(key, value)?,
            "batch_size" => self.batch_size = us(key, value)?,
            "beta1" => self.beta1 = fl(key, value)?,
            "beta2" => self.beta2 = fl(key, value)?,
            "deterministic" => {
                self.deterministic = match value {
                    "0" | "false" => false,
                    "1" | "true" => true,
                    _ => {
                        return Err(TensorError::InvalidConfig {
                            what: format!("deterministic: expected 0 or 1, got '{value}'"),
                        })
                    }
                }
            }
            "epochs" => self.epochs = us(key, value)?,
            "image_size" => self.image_size = us(key, value)?,
            "in_channels" => self.in_channels = us(key, value)?,
            "kl_weight" => self.kl_weight = fl(key, value)?,
            "lambda_cyc" => self.lambda_cyc = fl(key, value)?,
            "lambda_id" => self.lambda_id = fl(key, value)?,
            "lambda_l1" => self.lambda_l1 = fl(key, value)?,
            "latent_dim" => self.latent_dim = us(key, value)?,
            "lr" => self.lr = fl(key, value)?,
            "model" => self.kind = ModelKind::parse(value)?,
            "seed" => {
                self.seed = value.parse().map_err(|_| TensorError::InvalidConfig {
                    what: format!("seed: expected an integer, got '{value}'"),
                })?
            }
            _ => {
                return Err(TensorError::InvalidConfig {
                    what: format!("unknown key '{key}'"),
                })
            }
        }
        Ok(())
    }
}

/// One named loss component at one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub component: &'static str,
    pub value: f64,
    pub wall_secs: f64,
}

/// Append-only record of every loss component of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
}

impl TrainHistory {
    pub fn push(&mut self, epoch: usize, step: usize, component: &'static str, value: f64, wall: f64) {
        self.records.push(StepRecord {
            epoch,
            step,
            component,
            value,
            wall_secs: wall,
        });
    }

    pub fn all_finite(&self) -> bool {
        self.records.iter().all(|r| r.value.is_finite())
    }

    /// Values of one component in record order.
    pub fn component(&self, name: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.component == name)
            .map(|r| r.value)
            .collect()
    }

    /// Mean of one component within one epoch.
    pub fn epoch_mean(&self, name: &str, epoch: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.component == name && r.epoch == epoch)
            .map(|r| r.value)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// `epoch,step,component,value` CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,component,value\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.step, r.component, r.value));
        }
        out
    }
}

/// Successful training run.
pub struct TrainOutput<E: crate::scalar::Scalar> {
    pub bundle: ModelBundle<E>,
    pub history: TrainHistory,
}

/// A numeric failure mid-run: the error, where it happened, and the last
/// finite-loss state of the model.
pub struct TrainAbort<E: crate::scalar::Scalar> {
    pub error: TensorError,
    pub epoch: usize,
    pub step: usize,
    /// Dataset indices of the batch being processed.
    pub batch: Vec<usize>,
    pub last_good: ModelBundle<E>,
    pub history: TrainHistory,
}

pub enum TrainError<E: crate::scalar::Scalar> {
    /// Validation failure before any step ran.
    Invalid(TensorError),
    /// Numeric failure mid-run.
    Numeric(Box<TrainAbort<E>>),
}

impl<E: crate::scalar::Scalar> core::fmt::Debug for TrainError<E> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::Invalid(e) => write!(f, "Invalid({e})"),
            TrainError::Numeric(a) => write!(
                f,
                "Numeric({} at epoch {}, step {}, batch {:?})",
                a.error, a.epoch, a.step, a.batch
            ),
        }
    }
}

impl<E: crate::scalar::Scalar> core::fmt::Display for TrainError<E> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::Invalid(e) => write!(f, "{e}"),
            TrainError::Numeric(a) => write!(
                f,
                "numeric failure at epoch {}, step {} (batch {:?}): {}",
                a.epoch, a.step, a.batch, a.error
            ),
        }
    }
}
