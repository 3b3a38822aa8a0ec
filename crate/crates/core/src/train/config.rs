use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{AdvMode, LossWeights};
use crate::model::{DiscriminatorSpec, GeneratorSpec, UpsampleMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Last epoch at the base rate; `None` means `epochs / 2`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay_start: Option<usize>,
    pub batch_size: usize,
    pub buffer_size: usize,
    pub lambda_cyc: f64,
    pub lambda_ide: f64,
    pub seed: u64,
    pub adv_mode: AdvMode,
    pub beta1: f64,
    pub beta2: f64,
    /// Write a checkpoint after every `checkpoint_every` epochs (and always
    /// after the last one).
    pub checkpoint_every: usize,
    /// Recorded for provenance. The engine is single-threaded and always
    /// deterministic for a fixed seed.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            epochs: 200,
            lr: 2e-4,
            decay_start: None,
            batch_size: 1,
            buffer_size: 50,
            lambda_cyc: w.lambda_cyc,
            lambda_ide: w.lambda_ide,
            seed: 0,
            adv_mode: AdvMode::LeastSquares,
            beta1: 0.5,
            beta2: 0.999,
            checkpoint_every: 20,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn decay_start(&self) -> usize {
        self.decay_start.unwrap_or((self.epochs / 2).max(1))
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda_cyc: self.lambda_cyc, lambda_ide: self.lambda_ide }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        let ds = self.decay_start();
        if ds == 0 || ds > self.epochs {
            return bad(format!("decay_start must satisfy 0 < decay_start <= epochs, got {ds}"));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        self.weights().validate()
    }
}

/// Learning rate for a 1-based epoch: constant through `decay_start`, then
/// linear towards zero at `epochs + 1`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch == 0 || epoch > cfg.epochs {
        return Err(Error::Range(format!("epoch {epoch} outside 1..={}", cfg.epochs)));
    }
    let ds = cfg.decay_start();
    if epoch <= ds {
        return Ok(cfg.lr);
    }
    let span = (cfg.epochs - ds + 1) as f64;
    Ok(cfg.lr * (1.0 - (epoch - ds) as f64 / span))
}

/// Network shape settings shared by the generators and discriminators.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub resolution: usize,
    pub channels: usize,
    pub base_width: usize,
    /// `None` picks 9 blocks at 256² and above, 6 below.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_residual_blocks: Option<usize>,
    pub upsample: UpsampleMode,
    pub disc_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            channels: 3,
            base_width: 64,
            n_residual_blocks: None,
            upsample: UpsampleMode::Transpose,
            disc_widths: vec![64, 128, 256, 512],
        }
    }
}

impl ModelConfig {
    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            resolution: self.resolution,
            in_channels: self.channels,
            out_channels: self.channels,
            base_width: self.base_width,
            n_residual_blocks: self
                .n_residual_blocks
                .unwrap_or(if self.resolution >= 256 { 9 } else { 6 }),
            upsample: self.upsample,
        }
    }

    pub fn discriminator_spec(&self) -> DiscriminatorSpec {
        DiscriminatorSpec { in_channels: self.channels, widths: self.disc_widths.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator_spec().validate()?;
        let d = self.discriminator_spec();
        d.validate()?;
        if d.output_size(self.resolution).is_none() {
            return Err(Error::Spec(format!(
                "discriminator widths {:?} leave no output at resolution {}",
                self.disc_widths, self.resolution
            )));
        }
        Ok(())
    }
}

/// Contents of a `train --config` file: training and model keys side by
/// side in one flat table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse()?;
        let cfg: RunConfig = table.clone().try_into()?;
        reject_unknown_keys(&table, &cfg)?;
        cfg.train.validate()?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Flattened structs silently drop unknown keys; compare against a
/// round-trip of the parsed value to catch typos.
pub(crate) fn reject_unknown_keys<T: Serialize>(input: &toml::Table, parsed: &T) -> Result<()> {
    let known = toml::Table::try_from(parsed).map_err(|e| Error::Config(e.to_string()))?;
    let mut unknown: Vec<&String> = input.keys().filter(|k| !known.contains_key(*k)).collect();
    if unknown.is_empty() {
        return Ok(());
    }
    unknown.sort();
    Err(Error::Config(format!("unknown configuration keys: {unknown:?}")))
}
