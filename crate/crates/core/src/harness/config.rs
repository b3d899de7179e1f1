//! Flat `key=value` configuration with dotted keys.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors. The resolved snapshot
//! written by [`Config::to_text`] parses back to the same configuration.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use candle_core::DType;
use sha2::{Digest, Sha256};

use super::ablation::Variant;
use super::schedule::LrSchedule;
use crate::backbone::{Architecture, BackboneConfig};
use crate::data::PreprocessConfig;
use crate::episodic::{EvalConfig, PipelineFlags};
use crate::erasing::EraseConfig;
use crate::objective::{LossWeights, SoftmaxSign};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Validation episodes per epoch for checkpoint selection; 0 disables it.
    pub val_episodes: usize,
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 90,
            episodes_per_epoch: 100,
            schedule: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 5e-4,
            val_episodes: 100,
            dtype: DType::F32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeShape {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
}

impl Default for EpisodeShape {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            queries_per_class: 15,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub erase: EraseConfig,
    pub episode: EpisodeShape,
    pub preprocess: PreprocessConfig,
    pub variant: Variant,
    pub eval_episodes: usize,
    pub seed: u64,
    lambda_explicit: bool,
}

impl Default for Config {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        Self {
            loss: LossWeights::for_architecture(backbone.architecture),
            backbone,
            train: TrainConfig::default(),
            erase: EraseConfig::default(),
            episode: EpisodeShape::default(),
            preprocess: PreprocessConfig::default(),
            variant: Variant::Full,
            eval_episodes: 2000,
            seed: 0,
            lambda_explicit: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for {key}"))),
    }
}

fn parse_dtype(value: &str) -> Result<DType> {
    match value {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        _ => Err(Error::Config(format!("train.dtype must be f32 or f64, got `{value}`"))),
    }
}

/// Splits `key=value`, trimming both sides.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got `{s}`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "backbone.arch" => {
                self.backbone.architecture = value.parse::<Architecture>()?;
                if !self.lambda_explicit {
                    self.loss.lambda = LossWeights::for_architecture(self.backbone.architecture).lambda;
                }
            }
            "backbone.input_size" => self.backbone.input_size = parse(key, value)?,
            "backbone.drop_last_pool" => self.backbone.drop_last_pool = parse_bool(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.episodes_per_epoch" => self.train.episodes_per_epoch = parse(key, value)?,
            "train.lr_initial" => self.train.schedule.initial = parse(key, value)?,
            "train.lr_milestone" => self.train.schedule.milestone = parse(key, value)?,
            "train.lr_at_milestone" => self.train.schedule.at_milestone = parse(key, value)?,
            "train.lr_decay_factor" => self.train.schedule.decay_factor = parse(key, value)?,
            "train.lr_decay_every" => self.train.schedule.decay_every = parse(key, value)?,
            "train.momentum" => self.train.momentum = parse(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, value)?,
            "train.val_episodes" => self.train.val_episodes = parse(key, value)?,
            "train.dtype" => self.train.dtype = parse_dtype(value)?,
            "loss.alpha" => self.loss.alpha = parse(key, value)?,
            "loss.beta" => self.loss.beta = parse(key, value)?,
            "loss.lambda" => {
                self.loss.lambda = parse(key, value)?;
                self.lambda_explicit = true;
            }
            "loss.tau" => self.loss.tau = parse(key, value)?,
            "loss.softmax_sign" => self.loss.softmax_sign = value.parse::<SoftmaxSign>()?,
            "erase.gamma" => self.erase.gamma = parse(key, value)?,
            "erase.enabled" => self.erase.enabled_in_training = parse_bool(key, value)?,
            "episode.n_way" => self.episode.n_way = parse(key, value)?,
            "episode.k_shot" => self.episode.k_shot = parse(key, value)?,
            "episode.queries_per_class" => self.episode.queries_per_class = parse(key, value)?,
            "data.target_size" => self.preprocess.target_size = parse(key, value)?,
            "data.random_crop" => self.preprocess.augment.random_crop = parse_bool(key, value)?,
            "data.horizontal_flip" => self.preprocess.augment.horizontal_flip = parse_bool(key, value)?,
            "data.use_gt_box" => self.preprocess.use_gt_box = parse_bool(key, value)?,
            "data.crop_scale_min" => self.preprocess.crop_scale.0 = parse(key, value)?,
            "data.crop_scale_max" => self.preprocess.crop_scale.1 = parse(key, value)?,
            "variant" => self.set_variant(value.parse()?),
            "eval.episodes" => self.eval_episodes = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    pub fn set_variant(&mut self, v: Variant) {
        self.variant = v;
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = parse_assignment(line).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
            self.set(&k, &v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.train.schedule;
        let dtype = if self.train.dtype == DType::F64 { "f64" } else { "f32" };
        vec![
            ("backbone.arch", self.backbone.architecture.to_string()),
            ("backbone.input_size", self.backbone.input_size.to_string()),
            ("backbone.drop_last_pool", self.backbone.drop_last_pool.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.episodes_per_epoch", self.train.episodes_per_epoch.to_string()),
            ("train.lr_initial", s.initial.to_string()),
            ("train.lr_milestone", s.milestone.to_string()),
            ("train.lr_at_milestone", s.at_milestone.to_string()),
            ("train.lr_decay_factor", s.decay_factor.to_string()),
            ("train.lr_decay_every", s.decay_every.to_string()),
            ("train.momentum", self.train.momentum.to_string()),
            ("train.weight_decay", self.train.weight_decay.to_string()),
            ("train.val_episodes", self.train.val_episodes.to_string()),
            ("train.dtype", dtype.to_string()),
            ("loss.alpha", self.loss.alpha.to_string()),
            ("loss.beta", self.loss.beta.to_string()),
            ("loss.lambda", self.loss.lambda.to_string()),
            ("loss.tau", self.loss.tau.to_string()),
            ("loss.softmax_sign", self.loss.softmax_sign.to_string()),
            ("erase.gamma", self.erase.gamma.to_string()),
            ("erase.enabled", self.erase.enabled_in_training.to_string()),
            ("episode.n_way", self.episode.n_way.to_string()),
            ("episode.k_shot", self.episode.k_shot.to_string()),
            ("episode.queries_per_class", self.episode.queries_per_class.to_string()),
            ("data.target_size", self.preprocess.target_size.to_string()),
            ("data.random_crop", self.preprocess.augment.random_crop.to_string()),
            ("data.horizontal_flip", self.preprocess.augment.horizontal_flip.to_string()),
            ("data.use_gt_box", self.preprocess.use_gt_box.to_string()),
            ("data.crop_scale_min", self.preprocess.crop_scale.0.to_string()),
            ("data.crop_scale_max", self.preprocess.crop_scale.1.to_string()),
            ("variant", self.variant.to_string()),
            ("eval.episodes", self.eval_episodes.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// SHA-256 of the snapshot text, hex-encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Pipeline flags of the variant, with erasing subject to `erase.enabled`.
    pub fn flags(&self) -> PipelineFlags {
        let mut f = self.variant.flags();
        f.erasing &= self.erase.enabled_in_training;
        f
    }

    /// Preprocessing with ground-truth cropping forced on for the `with_bb` variant.
    pub fn preprocess_config(&self) -> PreprocessConfig {
        let mut p = self.preprocess.clone();
        p.use_gt_box |= self.variant.use_gt_box();
        p
    }

    pub fn eval_config(&self, n_episodes: usize, seed: u64) -> EvalConfig {
        EvalConfig {
            n_episodes,
            n_way: self.episode.n_way,
            k_shot: self.episode.k_shot,
            queries_per_class: self.episode.queries_per_class,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.erase.validate()?;
        self.preprocess.validate()?;
        self.train.schedule.validate()?;
        self.flags().validate()?;
        if self.preprocess.target_size != self.backbone.input_size {
            return Err(Error::Config(format!(
                "data.target_size ({}) must equal backbone.input_size ({})",
                self.preprocess.target_size, self.backbone.input_size
            )));
        }
        if self.episode.n_way < 2 || self.episode.k_shot == 0 || self.episode.queries_per_class == 0 {
            return Err(Error::Config("episodes need n_way ≥ 2, k_shot ≥ 1 and at least one query".into()));
        }
        Ok(())
    }
}
