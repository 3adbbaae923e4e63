//! Flat `key = value` run configuration with `#` comments.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::circulant::{EPSILON_LARGE, EPSILON_SMALL};
use crate::data_io::ShapePreset;
use crate::error::{Error, Result};
use crate::kernel::KernelNormalization;
use crate::wiener_loss::{BaselineKind, DEFAULT_C};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Proposed,
    Baseline(BaselineKind),
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "proposed" | "wiener" => Ok(Self::Proposed),
            "l2" => Ok(Self::Baseline(BaselineKind::L2)),
            "l1" => Ok(Self::Baseline(BaselineKind::L1)),
            "ce" => Ok(Self::Baseline(BaselineKind::Ce)),
            _ => Err(Error::Config(format!("unknown loss {s:?} (proposed, l2, l1, ce)"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Proposed => "proposed",
            Self::Baseline(BaselineKind::L2) => "l2",
            Self::Baseline(BaselineKind::L1) => "l1",
            Self::Baseline(BaselineKind::Ce) => "ce",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogDetMode {
    /// Treated as constant: excluded from the loss and its gradient.
    Omit,
    /// Differentiated through the generated kernel.
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorInput {
    /// The reparameterized posterior sample.
    Posterior,
    /// The standard normal noise of the reparameterization.
    Prior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormSetting {
    /// On for batches larger than [`BATCHNORM_AUTO_MIN`].
    Auto,
    On,
    Off,
}

/// Batches of this size or smaller train without batchnorm under `Auto`.
pub const BATCHNORM_AUTO_MIN: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Shapes { n: usize, preset: ShapePreset },
    Idx { images: PathBuf, labels: Option<PathBuf> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub c: f64,
    pub epsilon: f64,
    pub beta: f64,
    pub warmup_epochs: usize,
    pub kernel_size: usize,
    pub kernel_mode: KernelNormalization,
    pub lr: f64,
    /// Generator learning rate; `None` follows `lr`.
    pub g_lr: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub logdet: LogDetMode,
    pub g_input: GeneratorInput,
    pub g_hidden: usize,
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    pub hidden: usize,
    pub batchnorm: BatchNormSetting,
    pub ckpt_every: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub data: DataSource,
    pub data_seed: u64,
    /// Number of sample images written per epoch when an output directory is set.
    pub samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Proposed,
            c: DEFAULT_C,
            epsilon: EPSILON_LARGE,
            beta: 1.0,
            warmup_epochs: 10,
            kernel_size: crate::kernel_estimator::DEFAULT_KERNEL_SIZE,
            kernel_mode: KernelNormalization::Simplex,
            lr: 1e-4,
            g_lr: None,
            epochs: 25,
            batch_size: 32,
            seed: 0,
            logdet: LogDetMode::Omit,
            g_input: GeneratorInput::Posterior,
            g_hidden: crate::kernel_estimator::GENERATOR_HIDDEN,
            image_size: 32,
            channels: vec![32, 64, 128],
            latent_dim: 16,
            hidden: 256,
            batchnorm: BatchNormSetting::Auto,
            ckpt_every: 5,
            grad_clip: 0.0,
            data: DataSource::Shapes {
                n: 2000,
                preset: ShapePreset::Edges,
            },
            data_seed: 0,
            samples: 16,
        }
    }
}

/// Every key accepted by [`TrainConfig::set`].
pub const KEYS: &[&str] = &[
    "loss",
    "c",
    "epsilon",
    "beta",
    "warmup_epochs",
    "kernel_size",
    "kernel_mode",
    "lr",
    "g_lr",
    "epochs",
    "batch_size",
    "seed",
    "logdet",
    "g_input",
    "g_hidden",
    "image_size",
    "channels",
    "latent_dim",
    "hidden",
    "batchnorm",
    "ckpt_every",
    "grad_clip",
    "data",
    "n_images",
    "preset",
    "idx_images",
    "idx_labels",
    "data_seed",
    "samples",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl TrainConfig {
    pub fn g_lr(&self) -> f64 {
        self.g_lr.unwrap_or(self.lr)
    }

    pub fn batchnorm_enabled(&self) -> bool {
        match self.batchnorm {
            BatchNormSetting::On => true,
            BatchNormSetting::Off => false,
            BatchNormSetting::Auto => self.batch_size > BATCHNORM_AUTO_MIN,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "loss" => self.loss = v.parse()?,
            "c" | "C" => self.c = num(key, v)?,
            "epsilon" => {
                self.epsilon = match v {
                    "small" => EPSILON_SMALL,
                    "large" => EPSILON_LARGE,
                    _ => num(key, v)?,
                }
            }
            "beta" => self.beta = num(key, v)?,
            "warmup_epochs" => self.warmup_epochs = num(key, v)?,
            "kernel_size" => self.kernel_size = num(key, v)?,
            "kernel_mode" => {
                self.kernel_mode = match v {
                    "softmax" | "simplex" => KernelNormalization::Simplex,
                    "raw" => KernelNormalization::Raw,
                    _ => return Err(Error::Config(format!("kernel_mode: {v:?} (softmax, raw)"))),
                }
            }
            "lr" => self.lr = num(key, v)?,
            "g_lr" => self.g_lr = if v == "lr" { None } else { Some(num(key, v)?) },
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "logdet" => {
                self.logdet = match v {
                    "omit" => LogDetMode::Omit,
                    "exact" => LogDetMode::Exact,
                    _ => return Err(Error::Config(format!("logdet: {v:?} (omit, exact)"))),
                }
            }
            "g_input" => {
                self.g_input = match v {
                    "posterior" => GeneratorInput::Posterior,
                    "prior" => GeneratorInput::Prior,
                    _ => return Err(Error::Config(format!("g_input: {v:?} (posterior, prior)"))),
                }
            }
            "g_hidden" => self.g_hidden = num(key, v)?,
            "image_size" => self.image_size = num(key, v)?,
            "channels" => {
                self.channels = v
                    .split(',')
                    .map(|c| num::<usize>(key, c.trim()))
                    .collect::<Result<_>>()?
            }
            "latent_dim" => self.latent_dim = num(key, v)?,
            "hidden" => self.hidden = num(key, v)?,
            "batchnorm" => {
                self.batchnorm = match v {
                    "auto" => BatchNormSetting::Auto,
                    "on" | "true" => BatchNormSetting::On,
                    "off" | "false" => BatchNormSetting::Off,
                    _ => return Err(Error::Config(format!("batchnorm: {v:?} (auto, on, off)"))),
                }
            }
            "ckpt_every" => self.ckpt_every = num(key, v)?,
            "grad_clip" => self.grad_clip = num(key, v)?,
            "data" => {
                self.data = match v {
                    "shapes" => DataSource::Shapes {
                        n: 2000,
                        preset: ShapePreset::Edges,
                    },
                    "idx" => DataSource::Idx {
                        images: PathBuf::new(),
                        labels: None,
                    },
                    _ => return Err(Error::Config(format!("data: {v:?} (shapes, idx)"))),
                }
            }
            "n_images" => match &mut self.data {
                DataSource::Shapes { n, .. } => *n = num(key, v)?,
                _ => return Err(Error::Config("n_images applies to data = shapes".into())),
            },
            "preset" => match &mut self.data {
                DataSource::Shapes { preset, .. } => *preset = v.parse()?,
                _ => return Err(Error::Config("preset applies to data = shapes".into())),
            },
            "idx_images" => match &mut self.data {
                DataSource::Idx { images, .. } => *images = PathBuf::from(v),
                _ => return Err(Error::Config("idx_images applies to data = idx".into())),
            },
            "idx_labels" => match &mut self.data {
                DataSource::Idx { labels, .. } => *labels = (!v.is_empty()).then(|| PathBuf::from(v)),
                _ => return Err(Error::Config("idx_labels applies to data = idx".into())),
            },
            "data_seed" => self.data_seed = num(key, v)?,
            "samples" => self.samples = num(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key {other:?}; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines; `data` is applied first so its sub-keys
    /// may appear in any order.
    pub fn apply_text(&mut self, text: &str) -> Result<Vec<String>> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        self.apply_pairs(&pairs)
    }

    /// Returns the keys that were set.
    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<Vec<String>> {
        for (k, v) in pairs.iter().filter(|(k, _)| k == "data") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "data") {
            self.set(k, v)?;
        }
        Ok(pairs.iter().map(|(k, _)| k.clone()).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.c > 0.0) || !self.c.is_finite() {
            return fail(format!("c must be positive, got {}", self.c));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return fail(format!("epsilon must be nonnegative, got {}", self.epsilon));
        }
        if self.kernel_size.is_multiple_of(2) || self.kernel_size > self.image_size {
            return fail(format!(
                "kernel_size must be odd and fit the image, got {}",
                self.kernel_size
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        // equality is allowed: an all-warm-up run reproduces the L2 baseline
        if self.warmup_epochs > self.epochs {
            return fail(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.lr > 0.0) || !(self.g_lr() > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if !(self.beta >= 0.0) || !(self.grad_clip >= 0.0) {
            return fail("beta and grad_clip must be nonnegative".into());
        }
        if self.batchnorm == BatchNormSetting::On && self.batch_size < 2 {
            return fail("batchnorm needs batch_size >= 2".into());
        }
        if let DataSource::Idx { images, .. } = &self.data {
            if images.as_os_str().is_empty() {
                return fail("data = idx needs idx_images".into());
            }
        }
        if self.g_hidden == 0 {
            return fail("g_hidden must be positive".into());
        }
        Ok(())
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn to_cfg_string(&self) -> String {
        let mut lines = vec![
            format!("loss = {}", self.loss),
            format!("c = {}", self.c),
            format!("epsilon = {}", self.epsilon),
            format!("beta = {}", self.beta),
            format!("warmup_epochs = {}", self.warmup_epochs),
            format!("kernel_size = {}", self.kernel_size),
            format!(
                "kernel_mode = {}",
                match self.kernel_mode {
                    KernelNormalization::Simplex => "softmax",
                    KernelNormalization::Raw => "raw",
                }
            ),
            format!("lr = {}", self.lr),
            format!("g_lr = {}", self.g_lr()),
            format!("epochs = {}", self.epochs),
            format!("batch_size = {}", self.batch_size),
            format!("seed = {}", self.seed),
            format!(
                "logdet = {}",
                match self.logdet {
                    LogDetMode::Omit => "omit",
                    LogDetMode::Exact => "exact",
                }
            ),
            format!(
                "g_input = {}",
                match self.g_input {
                    GeneratorInput::Posterior => "posterior",
                    GeneratorInput::Prior => "prior",
                }
            ),
            format!("g_hidden = {}", self.g_hidden),
            format!("image_size = {}", self.image_size),
            format!(
                "channels = {}",
                self.channels
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            format!("latent_dim = {}", self.latent_dim),
            format!("hidden = {}", self.hidden),
            format!(
                "batchnorm = {}",
                match self.batchnorm {
                    BatchNormSetting::Auto => "auto",
                    BatchNormSetting::On => "on",
                    BatchNormSetting::Off => "off",
                }
            ),
            format!("ckpt_every = {}", self.ckpt_every),
            format!("grad_clip = {}", self.grad_clip),
        ];
        match &self.data {
            DataSource::Shapes { n, preset } => {
                lines.push("data = shapes".into());
                lines.push(format!("n_images = {n}"));
                lines.push(format!("preset = {preset}"));
            }
            DataSource::Idx { images, labels } => {
                lines.push("data = idx".into());
                lines.push(format!("idx_images = {}", images.display()));
                lines.push(format!(
                    "idx_labels = {}",
                    labels.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
                ));
            }
        }
        lines.push(format!("data_seed = {}", self.data_seed));
        lines.push(format!("samples = {}", self.samples));
        lines.join("\n") + "\n"
    }
}
