use std::fmt;
use std::path::PathBuf;

use super::checkpoint::Manifest;
use super::model::ModelConfig;
use super::optim::AdamWConfig;
use crate::collectives::{MaskKind, MaskSpec};
use crate::error::{Error, Result};
use crate::precision::PrecisionMode;
use crate::rng::mix_all;
use crate::transformer::BackwardPlacement;

const MASK_SALT: u64 = 0x6d61_736b_0000_0001;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum DataSource {
    /// Seeded uniform tokens.
    #[default]
    Synthetic,
    /// Byte-level tokens of a file.
    Corpus(PathBuf),
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Synthetic => f.write_str("synthetic"),
            DataSource::Corpus(p) => write!(f, "{}", p.display()),
        }
    }
}

/// Full description of a training run.
///
/// With `mask` set, `p` is the keep fraction of the mask baseline and every
/// block synchronizes all channels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub steps: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub p: f64,
    pub tp: usize,
    pub placement: BackwardPlacement,
    pub scale_private: bool,
    pub accum: PrecisionMode,
    pub mask: Option<MaskKind>,
    pub data: DataSource,
    /// Length of the synthetic stream.
    pub synth_len: usize,
    pub eval_every: u64,
    /// Upper bound on validation windows per evaluation.
    pub eval_windows: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            layers: 4,
            hidden: 128,
            heads: 4,
            vocab: 256,
            seq_len: 256,
            batch: 8,
            steps: 1000,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            weight_decay: adam.weight_decay,
            seed: 0,
            p: 1.0,
            tp: 2,
            placement: BackwardPlacement::HAfterNorm,
            scale_private: true,
            accum: PrecisionMode::Full64,
            mask: None,
            data: DataSource::Synthetic,
            synth_len: 1 << 16,
            eval_every: 100,
            eval_windows: 64,
            checkpoint_dir: None,
        }
    }
}

fn on_off(v: bool) -> &'static str {
    if v {
        "on"
    } else {
        "off"
    }
}

fn parse_num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{v}`")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 23] = [
        "layers",
        "hidden",
        "heads",
        "vocab",
        "seq_len",
        "batch",
        "steps",
        "lr",
        "beta1",
        "beta2",
        "weight_decay",
        "seed",
        "p",
        "tp",
        "placement",
        "scale_private",
        "accum",
        "mask",
        "data",
        "synth_len",
        "eval_every",
        "eval_windows",
        "checkpoint_dir",
    ];

    /// Applies one `key=value` setting. Dashes in keys are read as
    /// underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        match key.as_str() {
            "layers" => self.layers = parse_num(&key, v)?,
            "hidden" => self.hidden = parse_num(&key, v)?,
            "heads" => self.heads = parse_num(&key, v)?,
            "vocab" => self.vocab = parse_num(&key, v)?,
            "seq_len" => self.seq_len = parse_num(&key, v)?,
            "batch" => self.batch = parse_num(&key, v)?,
            "steps" => self.steps = parse_num(&key, v)?,
            "lr" => self.lr = parse_num(&key, v)?,
            "beta1" => self.beta1 = parse_num(&key, v)?,
            "beta2" => self.beta2 = parse_num(&key, v)?,
            "weight_decay" => self.weight_decay = parse_num(&key, v)?,
            "seed" => self.seed = parse_num(&key, v)?,
            "p" => self.p = parse_num(&key, v)?,
            "tp" => self.tp = parse_num(&key, v)?,
            "placement" => self.placement = v.parse()?,
            "scale_private" => {
                self.scale_private = match v {
                    "on" | "true" => true,
                    "off" | "false" => false,
                    _ => {
                        return Err(Error::Config(format!(
                            "`scale_private` expects on or off, got `{v}`"
                        )))
                    }
                }
            }
            "accum" => self.accum = v.parse()?,
            "mask" => self.mask = if v == "none" { None } else { Some(v.parse()?) },
            "data" => {
                self.data = if v == "synthetic" {
                    DataSource::Synthetic
                } else {
                    DataSource::Corpus(PathBuf::from(v))
                }
            }
            "synth_len" => self.synth_len = parse_num(&key, v)?,
            "eval_every" => self.eval_every = parse_num(&key, v)?,
            "eval_windows" => self.eval_windows = parse_num(&key, v)?,
            "checkpoint_dir" => {
                self.checkpoint_dir = if v.is_empty() || v == "none" {
                    None
                } else {
                    Some(PathBuf::from(v))
                }
            }
            other => return Err(Error::Config(format!("unknown setting `{other}`"))),
        }
        Ok(())
    }

    /// Defaults overridden by the `key=value` lines of `text`.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in &Manifest::parse(text)?.0 {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Every setting, in [`TrainConfig::KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.layers.to_string(),
            self.hidden.to_string(),
            self.heads.to_string(),
            self.vocab.to_string(),
            self.seq_len.to_string(),
            self.batch.to_string(),
            self.steps.to_string(),
            self.lr.to_string(),
            self.beta1.to_string(),
            self.beta2.to_string(),
            self.weight_decay.to_string(),
            self.seed.to_string(),
            self.p.to_string(),
            self.tp.to_string(),
            self.placement.to_string(),
            on_off(self.scale_private).to_string(),
            self.accum.to_string(),
            self.mask.map_or("none".to_string(), |m| m.to_string()),
            self.data.to_string(),
            self.synth_len.to_string(),
            self.eval_every.to_string(),
            self.eval_windows.to_string(),
            self.checkpoint_dir
                .as_ref()
                .map_or("none".to_string(), |p| p.display().to_string()),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }

    pub fn to_kv(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!(
                "p must lie in [0, 1], got {}",
                self.p
            )));
        }
        if self.seq_len == 0 || self.batch == 0 {
            return Err(Error::Config("seq_len and batch must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "weight_decay must be finite and non-negative".into(),
            ));
        }
        if self.eval_every == 0 || self.eval_windows == 0 {
            return Err(Error::Config(
                "eval_every and eval_windows must be positive".into(),
            ));
        }
        if matches!(self.data, DataSource::Corpus(_)) && self.vocab < 256 {
            return Err(Error::Config(format!(
                "byte-level corpora need a vocabulary of 256, got {}",
                self.vocab
            )));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab: self.vocab,
            hidden: self.hidden,
            heads: self.heads,
            layers: self.layers,
            ranks: self.tp,
            max_seq: self.seq_len,
            p: if self.mask.is_some() { 1.0 } else { self.p },
            scale_private: self.scale_private,
        }
    }

    pub fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn mask_spec(&self) -> Result<Option<MaskSpec>> {
        self.mask
            .map(|kind| MaskSpec::new(kind, self.p, mix_all(&[self.seed, MASK_SALT])))
            .transpose()
    }
}
