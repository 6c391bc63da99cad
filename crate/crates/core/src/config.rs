//! Run configuration: a flat `key = value` text file with dotted keys.
//!
//! Lines starting with `#` are comments; unknown keys are rejected so typos
//! fail loudly. See the README for the full key reference.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::apm::MixingStrategy;
use crate::backbone::BackboneConfig;
use crate::fixed_strategy::{BackgroundSeedConfig, TieBreak};
use crate::losses::LossWeights;
use crate::{Error, Result};

/// Which rule generates the fixed-strategy pseudo-label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum FixedStrategyKind {
    #[default]
    BackgroundSeed,
    Null,
    Perlin,
}

impl std::str::FromStr for FixedStrategyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "background-seed" => Ok(Self::BackgroundSeed),
            "null" => Ok(Self::Null),
            "perlin" => Ok(Self::Perlin),
            other => Err(Error::Config(format!("unknown fixed strategy '{other}'"))),
        }
    }
}

impl FixedStrategyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::BackgroundSeed => "background-seed",
            Self::Null => "null",
            Self::Perlin => "perlin",
        }
    }
}

/// Fixed-strategy generator settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixedConfig {
    pub strategy: FixedStrategyKind,
    /// Constant for the null generator (0 or 1).
    pub null_value: u8,
    pub perlin_threshold: f64,
    pub seed_rule: BackgroundSeedConfig,
}

impl Default for FixedConfig {
    fn default() -> Self {
        Self {
            strategy: FixedStrategyKind::BackgroundSeed,
            null_value: 0,
            perlin_threshold: 0.5,
            seed_rule: BackgroundSeedConfig::default(),
        }
    }
}

/// Everything a run needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub ema_momentum: f64,
    pub student_lr: f64,
    pub disc_lr: f64,
    /// Small-object area-ratio threshold for Look-Twice.
    pub tau: f64,
    pub seed: u64,
    /// Square size images are resized to for training and re-inference.
    pub train_size: usize,
    pub look_twice: bool,
    pub mixing: MixingStrategy,
    pub disc_input_size: usize,
    pub loss_weights: LossWeights,
    pub fixed: FixedConfig,
    pub backbone: BackboneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 32,
            ema_momentum: 0.99,
            student_lr: 1e-4,
            disc_lr: 1e-4,
            tau: 0.15,
            seed: 42,
            train_size: 224,
            look_twice: true,
            mixing: MixingStrategy::Apm,
            disc_input_size: 64,
            loss_weights: LossWeights::default(),
            fixed: FixedConfig::default(),
            backbone: BackboneConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!(
                "ema_momentum {} outside [0,1]",
                self.ema_momentum
            )));
        }
        if !(0.0 < self.tau && self.tau < 1.0) {
            return Err(Error::Config(format!("tau {} outside (0,1)", self.tau)));
        }
        if self.train_size < self.backbone.patch_size {
            return Err(Error::Config(format!(
                "train_size {} smaller than patch size {}",
                self.train_size, self.backbone.patch_size
            )));
        }
        if self.disc_input_size < 8 {
            return Err(Error::Config(format!(
                "apm.disc_input_size {} too small (minimum 8)",
                self.disc_input_size
            )));
        }
        if self.fixed.null_value > 1 {
            return Err(Error::Config("fixed.null_value must be 0 or 1".into()));
        }
        if !(0.0 < self.fixed.perlin_threshold && self.fixed.perlin_threshold < 1.0) {
            return Err(Error::Config(
                "fixed.perlin_threshold must lie in (0,1)".into(),
            ));
        }
        Ok(())
    }

    /// Flat key/value snapshot, reversible through [`parse_config`].
    pub fn to_key_values(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        kv.insert("epochs".into(), self.epochs.to_string());
        kv.insert("batch_size".into(), self.batch_size.to_string());
        kv.insert("ema_momentum".into(), self.ema_momentum.to_string());
        kv.insert("student_lr".into(), self.student_lr.to_string());
        kv.insert("disc_lr".into(), self.disc_lr.to_string());
        kv.insert("tau".into(), self.tau.to_string());
        kv.insert("seed".into(), self.seed.to_string());
        kv.insert("train_size".into(), self.train_size.to_string());
        kv.insert("look_twice".into(), self.look_twice.to_string());
        kv.insert(
            "apm.strategy".into(),
            match self.mixing {
                MixingStrategy::Apm => "apm",
                MixingStrategy::Proportional => "proportional",
                MixingStrategy::LinearDecay => "linear_decay",
            }
            .into(),
        );
        kv.insert(
            "apm.disc_input_size".into(),
            self.disc_input_size.to_string(),
        );
        kv.insert("loss.seg".into(), self.loss_weights.seg.to_string());
        kv.insert("loss.orth".into(), self.loss_weights.orth.to_string());
        kv.insert("loss.dis".into(), self.loss_weights.dis.to_string());
        kv.insert("fixed.strategy".into(), self.fixed.strategy.as_str().into());
        kv.insert("fixed.null_value".into(), self.fixed.null_value.to_string());
        kv.insert(
            "fixed.perlin_threshold".into(),
            self.fixed.perlin_threshold.to_string(),
        );
        kv.insert(
            "fixed.similarity_threshold".into(),
            self.fixed.seed_rule.similarity_threshold.to_string(),
        );
        kv.insert(
            "fixed.tie_break".into(),
            match self.fixed.seed_rule.tie_break {
                TieBreak::LowestIndex => "lowest",
                TieBreak::HighestIndex => "highest",
            }
            .into(),
        );
        kv.insert("backbone.name".into(), self.backbone.name.clone());
        kv.insert(
            "backbone.patch_size".into(),
            self.backbone.patch_size.to_string(),
        );
        kv.insert(
            "backbone.channels".into(),
            self.backbone.channels.to_string(),
        );
        kv.insert("backbone.seed".into(), self.backbone.seed.to_string());
        if let Some(dir) = &self.backbone.feature_dir {
            kv.insert("backbone.feature_dir".into(), dir.display().to_string());
        }
        kv
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = '{value}'")))
}

/// Parses the flat key/value format over the defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "epochs" => cfg.epochs = parse_num(key, value)?,
            "batch_size" => cfg.batch_size = parse_num(key, value)?,
            "ema_momentum" => cfg.ema_momentum = parse_num(key, value)?,
            "student_lr" => cfg.student_lr = parse_num(key, value)?,
            "disc_lr" => cfg.disc_lr = parse_num(key, value)?,
            "tau" => cfg.tau = parse_num(key, value)?,
            "seed" => cfg.seed = parse_num(key, value)?,
            "train_size" => cfg.train_size = parse_num(key, value)?,
            "look_twice" => cfg.look_twice = parse_num(key, value)?,
            "apm.strategy" => cfg.mixing = value.parse()?,
            "apm.disc_input_size" => cfg.disc_input_size = parse_num(key, value)?,
            "loss.seg" => cfg.loss_weights.seg = parse_num(key, value)?,
            "loss.orth" => cfg.loss_weights.orth = parse_num(key, value)?,
            "loss.dis" => cfg.loss_weights.dis = parse_num(key, value)?,
            "fixed.strategy" => cfg.fixed.strategy = value.parse()?,
            "fixed.null_value" => cfg.fixed.null_value = parse_num(key, value)?,
            "fixed.perlin_threshold" => cfg.fixed.perlin_threshold = parse_num(key, value)?,
            "fixed.similarity_threshold" => {
                cfg.fixed.seed_rule.similarity_threshold = parse_num(key, value)?
            }
            "fixed.tie_break" => {
                cfg.fixed.seed_rule.tie_break = match value {
                    "lowest" => TieBreak::LowestIndex,
                    "highest" => TieBreak::HighestIndex,
                    other => {
                        return Err(Error::Config(format!("unknown tie_break '{other}'")))
                    }
                }
            }
            "backbone.name" => cfg.backbone.name = value.to_string(),
            "backbone.patch_size" => cfg.backbone.patch_size = parse_num(key, value)?,
            "backbone.channels" => cfg.backbone.channels = parse_num(key, value)?,
            "backbone.seed" => cfg.backbone.seed = parse_num(key, value)?,
            "backbone.feature_dir" => {
                cfg.backbone.feature_dir = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and parses a config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
