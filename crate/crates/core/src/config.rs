//! Run configuration: every hyperparameter plus data paths, read from a
//! line-oriented `key = value` file.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. Relative paths are resolved against the file's directory.

use std::path::{Path, PathBuf};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::hybridspace::{LossConfig, SpaceConfig};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    /// Words seen fewer times in the training captions map to the unknown token.
    pub min_count: usize,
    pub data: DataPaths,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataPaths {
    pub features: Option<PathBuf>,
    pub captions: Option<PathBuf>,
    pub val_features: Option<PathBuf>,
    pub val_captions: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub lemmas: Option<PathBuf>,
    pub content_words: Option<PathBuf>,
    /// Initial word vectors, one `word v1 … vE` line per word.
    pub embeddings: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            min_count: 5,
            data: DataPaths::default(),
        }
    }
}

/// Hyperparameter keys in the order [`RunConfig::hyperparameters_text`] writes them.
pub const HYPERPARAMETER_KEYS: &[&str] = &[
    "frame_dim",
    "word_embed_dim",
    "gru_hidden",
    "text_gru_hidden",
    "conv_filters",
    "video_kernels",
    "text_kernels",
    "max_sentence_len",
    "latent_dim",
    "concept_dim",
    "bn_momentum",
    "bn_eps",
    "margin",
    "alpha",
    "bce_eps",
    "batch_size",
    "learning_rate",
    "lr_decay_patience",
    "lr_decay_factor",
    "early_stop_patience",
    "max_epochs",
    "seed",
    "min_count",
];

pub const PATH_KEYS: &[&str] = &[
    "features",
    "captions",
    "val_features",
    "val_captions",
    "stopwords",
    "lemmas",
    "content_words",
    "embeddings",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

fn parse_list(key: &str, value: &str) -> std::result::Result<Vec<usize>, String> {
    value
        .split(',')
        .map(|v| parse_num(key, v.trim()))
        .collect()
}

fn join_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key. Path values are taken as given.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let enc: &mut EncoderConfig = &mut self.model.encoder;
        let space: &mut SpaceConfig = &mut self.model.space;
        let path = || Some(PathBuf::from(value));
        match key {
            "frame_dim" => enc.frame_dim = parse_num(key, value)?,
            "word_embed_dim" => enc.word_embed_dim = parse_num(key, value)?,
            "gru_hidden" => enc.gru_hidden = parse_num(key, value)?,
            "text_gru_hidden" => enc.text_gru_hidden = parse_num(key, value)?,
            "conv_filters" => enc.conv_filters = parse_num(key, value)?,
            "video_kernels" => enc.video_kernels = parse_list(key, value)?,
            "text_kernels" => enc.text_kernels = parse_list(key, value)?,
            "max_sentence_len" => enc.max_sentence_len = parse_num(key, value)?,
            "latent_dim" => space.latent_dim = parse_num(key, value)?,
            "concept_dim" => space.concept_dim = parse_num(key, value)?,
            "bn_momentum" => space.bn_momentum = parse_num(key, value)?,
            "bn_eps" => space.bn_eps = parse_num(key, value)?,
            "margin" => self.loss.margin = parse_num(key, value)?,
            "alpha" => self.loss.alpha = parse_num(key, value)?,
            "bce_eps" => self.loss.bce_eps = parse_num(key, value)?,
            "batch_size" => self.train.batch_size = parse_num(key, value)?,
            "learning_rate" => self.train.learning_rate = parse_num(key, value)?,
            "lr_decay_patience" => self.train.lr_decay_patience = parse_num(key, value)?,
            "lr_decay_factor" => self.train.lr_decay_factor = parse_num(key, value)?,
            "early_stop_patience" => self.train.early_stop_patience = parse_num(key, value)?,
            "max_epochs" => self.train.max_epochs = parse_num(key, value)?,
            "seed" => self.train.seed = parse_num(key, value)?,
            "min_count" => self.min_count = parse_num(key, value)?,
            "features" => self.data.features = path(),
            "captions" => self.data.captions = path(),
            "val_features" => self.data.val_features = path(),
            "val_captions" => self.data.val_captions = path(),
            "stopwords" => self.data.stopwords = path(),
            "lemmas" => self.data.lemmas = path(),
            "content_words" => self.data.content_words = path(),
            "embeddings" => self.data.embeddings = path(),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `origin` names the
    /// source in errors; relative paths are joined onto `base`.
    pub fn apply_text(&mut self, text: &str, origin: &str, base: Option<&Path>) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.to_owned(),
                line: n + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let value = match base {
                Some(dir) if PATH_KEYS.contains(&key) && Path::new(value).is_relative() => {
                    dir.join(value).to_string_lossy().into_owned()
                }
                _ => value.to_owned(),
            };
            self.set(key, &value).map_err(err)?;
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, origin, None)?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string(), path.parent())?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let enc = &self.model.encoder;
        let space = &self.model.space;
        let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        Some(match key {
            "frame_dim" => enc.frame_dim.to_string(),
            "word_embed_dim" => enc.word_embed_dim.to_string(),
            "gru_hidden" => enc.gru_hidden.to_string(),
            "text_gru_hidden" => enc.text_gru_hidden.to_string(),
            "conv_filters" => enc.conv_filters.to_string(),
            "video_kernels" => join_list(&enc.video_kernels),
            "text_kernels" => join_list(&enc.text_kernels),
            "max_sentence_len" => enc.max_sentence_len.to_string(),
            "latent_dim" => space.latent_dim.to_string(),
            "concept_dim" => space.concept_dim.to_string(),
            "bn_momentum" => space.bn_momentum.to_string(),
            "bn_eps" => space.bn_eps.to_string(),
            "margin" => self.loss.margin.to_string(),
            "alpha" => self.loss.alpha.to_string(),
            "bce_eps" => self.loss.bce_eps.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "learning_rate" => self.train.learning_rate.to_string(),
            "lr_decay_patience" => self.train.lr_decay_patience.to_string(),
            "lr_decay_factor" => self.train.lr_decay_factor.to_string(),
            "early_stop_patience" => self.train.early_stop_patience.to_string(),
            "max_epochs" => self.train.max_epochs.to_string(),
            "seed" => self.train.seed.to_string(),
            "min_count" => self.min_count.to_string(),
            "features" => return p(&self.data.features),
            "captions" => return p(&self.data.captions),
            "val_features" => return p(&self.data.val_features),
            "val_captions" => return p(&self.data.val_captions),
            "stopwords" => return p(&self.data.stopwords),
            "lemmas" => return p(&self.data.lemmas),
            "content_words" => return p(&self.data.content_words),
            "embeddings" => return p(&self.data.embeddings),
            _ => return None,
        })
    }

    /// Every hyperparameter as `key = value` lines, without data paths.
    /// Floats use the shortest representation that parses back exactly.
    pub fn hyperparameters_text(&self) -> String {
        HYPERPARAMETER_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.min_count == 0 {
            return Err(Error::invalid("min_count must be positive"));
        }
        Ok(())
    }
}
