//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated. Unknown keys are rejected so typos do not silently fall
//! back to defaults.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::LossConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum DecoderKind {
    Fc,
    Deconv,
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderKind::Fc => "fc",
            DecoderKind::Deconv => "deconv",
        })
    }
}

impl FromStr for DecoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fc" => Ok(DecoderKind::Fc),
            "deconv" => Ok(DecoderKind::Deconv),
            other => Err(Error::Config(format!("decoder must be `fc` or `deconv`, got `{other}`"))),
        }
    }
}

/// Architecture hyperparameters. Everything here is persisted in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub frame_size: usize,
    pub num_classes: usize,
    pub capsule_dim: usize,
    pub primary_capsule_dim: usize,
    pub primary_capsule_channels: usize,
    pub routing_iterations: usize,
    /// Output channels of the plain conv layers; the first has stride 1, the rest stride 2.
    pub conv_channels: Vec<usize>,
    /// One vote matrix per primary capsule channel instead of per capsule.
    pub shared_vote_weights: bool,
    pub decoder: DecoderKind,
    pub decoder_hidden_sizes: Vec<usize>,
    pub lstm_hidden: usize,
    pub sequence_length: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frame_size: 48,
            num_classes: 6,
            capsule_dim: 30,
            primary_capsule_dim: 8,
            primary_capsule_channels: 32,
            routing_iterations: 3,
            conv_channels: vec![64, 128],
            shared_vote_weights: true,
            decoder: DecoderKind::Fc,
            decoder_hidden_sizes: vec![512, 1024],
            lstm_hidden: 128,
            sequence_length: 16,
        }
    }
}

/// Everything a training run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Whether `num_classes` was given explicitly; otherwise the manifest decides.
    pub num_classes_set: bool,
    pub loss_config: LossConfig,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub split_seed: u64,
    pub test_fraction: f64,
    pub subject_disjoint: bool,
    pub augment: bool,
    pub data_root: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            num_classes_set: false,
            loss_config: LossConfig::MarginReconCrossEntropy,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            epochs: 100,
            early_stop_patience: 15,
            seed: 0,
            split_seed: 0,
            test_fraction: 0.2,
            subject_disjoint: false,
            augment: true,
            data_root: None,
        }
    }
}

/// Raw key/value pairs in file order.
#[derive(Clone, Debug, Default)]
pub struct KeyValues(BTreeMap<String, String>);

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = k.trim().to_string();
            if map.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        Ok(KeyValues(map))
    }

    fn take<V: FromStr>(&mut self, key: &str) -> Result<Option<V>> {
        match self.0.remove(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("cannot parse `{key} = {raw}`"))),
        }
    }

    fn take_list(&mut self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.0.remove(key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| Error::Config(format!("cannot parse list `{key} = {raw}`"))),
        }
    }

    fn finish(self) -> Result<()> {
        match self.0.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
        }
    }
}

macro_rules! set_from {
    ($kv:ident, $target:expr, $key:literal) => {
        if let Some(v) = $kv.take($key)? {
            $target = v;
        }
    };
}

impl ModelConfig {
    fn absorb(&mut self, kv: &mut KeyValues) -> Result<bool> {
        set_from!(kv, self.frame_size, "frame_size");
        let classes: Option<usize> = kv.take("num_classes")?;
        if let Some(n) = classes {
            self.num_classes = n;
        }
        set_from!(kv, self.capsule_dim, "capsule_dim");
        set_from!(kv, self.primary_capsule_dim, "primary_capsule_dim");
        set_from!(kv, self.primary_capsule_channels, "primary_capsule_channels");
        set_from!(kv, self.routing_iterations, "routing_iterations");
        if let Some(v) = kv.take_list("conv_channels")? {
            self.conv_channels = v;
        }
        set_from!(kv, self.shared_vote_weights, "shared_vote_weights");
        set_from!(kv, self.decoder, "decoder");
        if let Some(v) = kv.take_list("decoder_hidden_sizes")? {
            self.decoder_hidden_sizes = v;
        }
        set_from!(kv, self.lstm_hidden, "lstm_hidden");
        set_from!(kv, self.sequence_length, "sequence_length");
        Ok(classes.is_some())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut cfg = ModelConfig::default();
        cfg.absorb(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes < 1 {
            return fail("num_classes must be at least 1");
        }
        if self.routing_iterations < 1 {
            return fail("routing_iterations must be at least 1");
        }
        if self.capsule_dim == 0 || self.primary_capsule_dim == 0 || self.primary_capsule_channels == 0 {
            return fail("capsule dimensions must be positive");
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return fail("conv_channels needs at least one positive entry");
        }
        if self.lstm_hidden == 0 || self.sequence_length == 0 {
            return fail("lstm_hidden and sequence_length must be positive");
        }
        if self.primary_grid().is_none() {
            return Err(Error::Config(format!(
                "frame_size {} is too small for {} conv layers plus the primary capsule layer",
                self.frame_size,
                self.conv_channels.len()
            )));
        }
        match self.decoder {
            DecoderKind::Fc if self.decoder_hidden_sizes.contains(&0) => fail("decoder_hidden_sizes must be positive"),
            DecoderKind::Deconv if self.decoder_hidden_sizes.len() != 1 || self.deconv_seed_side().is_none() => {
                fail("deconv decoder needs one hidden size (channels) and a frame_size divisible by 8")
            }
            _ => Ok(()),
        }
    }

    /// Side of the primary-capsule grid, if every layer fits.
    pub fn primary_grid(&self) -> Option<usize> {
        let mut side = self.frame_size;
        for l in 0..=self.conv_channels.len() {
            let stride = if l == 0 { 1 } else { 2 };
            if side < 3 {
                return None;
            }
            side = (side - 3) / stride + 1;
        }
        Some(side)
    }

    pub fn primary_capsule_count(&self) -> usize {
        let g = self.primary_grid().unwrap_or(0);
        self.primary_capsule_channels * g * g
    }

    pub(crate) fn deconv_seed_side(&self) -> Option<usize> {
        (self.frame_size.is_multiple_of(8) && self.frame_size >= 8).then_some(self.frame_size / 8)
    }

    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "frame_size = {}", self.frame_size);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "capsule_dim = {}", self.capsule_dim);
        let _ = writeln!(s, "primary_capsule_dim = {}", self.primary_capsule_dim);
        let _ = writeln!(s, "primary_capsule_channels = {}", self.primary_capsule_channels);
        let _ = writeln!(s, "routing_iterations = {}", self.routing_iterations);
        let _ = writeln!(s, "conv_channels = {}", list(&self.conv_channels));
        let _ = writeln!(s, "shared_vote_weights = {}", self.shared_vote_weights);
        let _ = writeln!(s, "decoder = {}", self.decoder);
        let _ = writeln!(s, "decoder_hidden_sizes = {}", list(&self.decoder_hidden_sizes));
        let _ = writeln!(s, "lstm_hidden = {}", self.lstm_hidden);
        let _ = writeln!(s, "sequence_length = {}", self.sequence_length);
        s
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut cfg = TrainConfig::default();
        cfg.num_classes_set = cfg.model.absorb(&mut kv)?;
        set_from!(kv, cfg.loss_config, "loss_config");
        set_from!(kv, cfg.learning_rate, "learning_rate");
        set_from!(kv, cfg.beta1, "beta1");
        set_from!(kv, cfg.beta2, "beta2");
        set_from!(kv, cfg.epsilon, "epsilon");
        set_from!(kv, cfg.batch_size, "batch_size");
        set_from!(kv, cfg.epochs, "epochs");
        set_from!(kv, cfg.early_stop_patience, "early_stop_patience");
        set_from!(kv, cfg.seed, "seed");
        cfg.split_seed = cfg.seed;
        set_from!(kv, cfg.split_seed, "split_seed");
        set_from!(kv, cfg.test_fraction, "test_fraction");
        set_from!(kv, cfg.subject_disjoint, "subject_disjoint");
        set_from!(kv, cfg.augment, "augment");
        if let Some(root) = kv.take::<String>("data_root")? {
            cfg.data_root = Some(PathBuf::from(root));
        }
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = self.model.to_text();
        let _ = writeln!(s, "loss_config = {}", self.loss_config);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "epsilon = {}", self.epsilon);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "early_stop_patience = {}", self.early_stop_patience);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "split_seed = {}", self.split_seed);
        let _ = writeln!(s, "test_fraction = {}", self.test_fraction);
        let _ = writeln!(s, "subject_disjoint = {}", self.subject_disjoint);
        let _ = writeln!(s, "augment = {}", self.augment);
        if let Some(root) = &self.data_root {
            let _ = writeln!(s, "data_root = {}", root.display());
        }
        s
    }
}
