//! `key = value` configuration with `#` comments.
//!
//! Every model, training and data knob has a key. Unknown keys are errors.
//! `vocab_size` and `feature_dim` are normally derived from the data; when
//! set explicitly they must agree with it.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::{SplitSpec, SplitSpecLists};
use crate::error::{Error, Result};
use crate::fsio;
use crate::model::ModelConfig;
use crate::optim::TrainConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataConfig {
    pub min_count: usize,
    pub dev_n: usize,
    pub test_n: usize,
    pub split_seed: u64,
    /// Optional files of image ids, one per line. When dev and test lists
    /// are both given they replace the seeded split.
    pub train_ids: Option<String>,
    pub dev_ids: Option<String>,
    pub test_ids: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            min_count: 5,
            dev_n: 1000,
            test_n: 1000,
            split_seed: 0,
            train_ids: None,
            dev_ids: None,
            test_ids: None,
        }
    }
}

impl DataConfig {
    /// Resolves the split, reading id list files if configured.
    pub fn split_spec(&self) -> Result<SplitSpec> {
        let read_ids = |p: &str| -> Result<Vec<String>> {
            Ok(fsio::read_to_string(p)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect())
        };
        match (&self.dev_ids, &self.test_ids) {
            (Some(dev), Some(test)) => Ok(SplitSpec::Explicit(SplitSpecLists {
                train: self.train_ids.as_deref().map(read_ids).transpose()?,
                dev: read_ids(dev)?,
                test: read_ids(test)?,
            })),
            (None, None) if self.train_ids.is_none() => Ok(SplitSpec::Random {
                dev_n: self.dev_n,
                test_n: self.test_n,
                seed: self.split_seed,
            }),
            _ => Err(Error::Config(
                "explicit splits need both dev_ids and test_ids".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    /// `vocab_size` and `feature_dim` are 0 until known.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            model: ModelConfig::new(0, 0),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

/// Which group a key belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyGroup {
    Model,
    Train,
    Data,
}

pub const MODEL_KEYS: &[&str] = &[
    "vocab_size",
    "embed_dim",
    "hidden_dim",
    "depth",
    "feature_dim",
    "activation",
    "feed_mode",
    "max_decode_len",
    "share_transition_weights",
];

pub const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "epochs",
    "learning_rate",
    "rms_decay",
    "rms_eps",
    "clip_bound",
    "l2_coeff",
    "dropout_p",
    "dropout_embedding",
    "dropout_image",
    "lr_decay_per_epoch",
    "seed",
];

pub const DATA_KEYS: &[&str] = &[
    "min_count",
    "dev_n",
    "test_n",
    "split_seed",
    "train_ids",
    "dev_ids",
    "test_ids",
];

pub fn key_group(key: &str) -> Option<KeyGroup> {
    if MODEL_KEYS.contains(&key) {
        Some(KeyGroup::Model)
    } else if TRAIN_KEYS.contains(&key) {
        Some(KeyGroup::Train)
    } else if DATA_KEYS.contains(&key) {
        Some(KeyGroup::Data)
    } else {
        None
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn optional_path(value: &str) -> Option<String> {
    (!value.is_empty()).then(|| value.to_string())
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "vocab_size" => m.vocab_size = parse(key, value)?,
            "embed_dim" => m.embed_dim = parse(key, value)?,
            "hidden_dim" => m.hidden_dim = parse(key, value)?,
            "depth" => m.depth = parse(key, value)?,
            "feature_dim" => m.feature_dim = parse(key, value)?,
            "activation" => m.activation = value.parse()?,
            "feed_mode" => m.feed_mode = value.parse()?,
            "max_decode_len" => m.max_decode_len = parse(key, value)?,
            "share_transition_weights" => m.share_transition_weights = parse_bool(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "rms_decay" => t.rms_decay = parse(key, value)?,
            "rms_eps" => t.rms_eps = parse(key, value)?,
            "clip_bound" => t.clip_bound = parse(key, value)?,
            "l2_coeff" => t.l2_coeff = parse(key, value)?,
            "dropout_p" => t.dropout_p = parse(key, value)?,
            "dropout_embedding" => t.dropout_embedding = parse_bool(key, value)?,
            "dropout_image" => t.dropout_image = parse_bool(key, value)?,
            "lr_decay_per_epoch" => t.lr_decay_per_epoch = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "min_count" => d.min_count = parse(key, value)?,
            "dev_n" => d.dev_n = parse(key, value)?,
            "test_n" => d.test_n = parse(key, value)?,
            "split_seed" => d.split_seed = parse(key, value)?,
            "train_ids" => d.train_ids = optional_path(value),
            "dev_ids" => d.dev_ids = optional_path(value),
            "test_ids" => d.test_ids = optional_path(value),
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` (or `key=value`) into `(key, value)`.
    pub fn split_assignment(line: &str) -> Option<(&str, &str)> {
        let (k, v) = line.split_once('=')?;
        let k = k.trim();
        (!k.is_empty()).then(|| (k, v.trim()))
    }

    /// Applies every assignment in `text`; errors are prefixed with
    /// `origin:line`.
    pub fn apply_text(&mut self, origin: &str, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("{origin}:{}: {msg}", i + 1));
            let (k, v) = Self::split_assignment(line)
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            self.set(k, v).map_err(|e| match e {
                Error::Config(msg) => at(msg),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fsio::read_to_string(path)?;
        self.apply_text(&path.display().to_string(), &text)
    }

    pub fn parse_text(origin: &str, text: &str) -> Result<Self> {
        let mut s = Self::default();
        s.apply_text(origin, text)?;
        Ok(s)
    }

    /// Current value of `key` in the text form accepted by [`Settings::set`].
    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let opt = |p: &Option<String>| p.clone().unwrap_or_default();
        Some(match key {
            "vocab_size" => m.vocab_size.to_string(),
            "embed_dim" => m.embed_dim.to_string(),
            "hidden_dim" => m.hidden_dim.to_string(),
            "depth" => m.depth.to_string(),
            "feature_dim" => m.feature_dim.to_string(),
            "activation" => m.activation.to_string(),
            "feed_mode" => m.feed_mode.to_string(),
            "max_decode_len" => m.max_decode_len.to_string(),
            "share_transition_weights" => m.share_transition_weights.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "epochs" => t.epochs.to_string(),
            "learning_rate" => format!("{:?}", t.learning_rate),
            "rms_decay" => format!("{:?}", t.rms_decay),
            "rms_eps" => format!("{:?}", t.rms_eps),
            "clip_bound" => format!("{:?}", t.clip_bound),
            "l2_coeff" => format!("{:?}", t.l2_coeff),
            "dropout_p" => format!("{:?}", t.dropout_p),
            "dropout_embedding" => t.dropout_embedding.to_string(),
            "dropout_image" => t.dropout_image.to_string(),
            "lr_decay_per_epoch" => format!("{:?}", t.lr_decay_per_epoch),
            "seed" => t.seed.to_string(),
            "min_count" => d.min_count.to_string(),
            "dev_n" => d.dev_n.to_string(),
            "test_n" => d.test_n.to_string(),
            "split_seed" => d.split_seed.to_string(),
            "train_ids" => opt(&d.train_ids),
            "dev_ids" => opt(&d.dev_ids),
            "test_ids" => opt(&d.test_ids),
            _ => return None,
        })
    }

    /// Every key as a `key = value` line; parses back to an equal value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in MODEL_KEYS.iter().chain(TRAIN_KEYS).chain(DATA_KEYS) {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    /// Keys of `group` whose values differ between `self` and `other`.
    pub fn changed_keys(&self, other: &Settings, group: KeyGroup) -> Vec<&'static str> {
        let keys = match group {
            KeyGroup::Model => MODEL_KEYS,
            KeyGroup::Train => TRAIN_KEYS,
            KeyGroup::Data => DATA_KEYS,
        };
        keys.iter()
            .copied()
            .filter(|k| self.get(k) != other.get(k))
            .collect()
    }
}
