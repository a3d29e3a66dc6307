//! Flat `key = value` run configuration with environment overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::decoding::DecodeMode;
use crate::error::{Error, Result};
use crate::models::{CtcWeight, ModelConfig, Variant};
use crate::numerics::AdamConfig;
use crate::sequence::Prior;
use crate::synthdata::CorpusConfig;

pub const ENV_PREFIX: &str = "INSCTC_";

/// Environment variable that overrides `key`: `model.dim` → `INSCTC_MODEL_DIM`.
pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_ascii_uppercase().replace('.', "_"))
}

/// Parsed `key = value` lines. `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| Error::Parse {
                what: origin.to_string(),
                line: n + 1,
                msg: msg.to_string(),
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`"))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(err("malformed key"));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(err(&format!("duplicate key `{k}`")));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Replaces each of `keys` whose environment variable `lookup` finds.
    pub fn apply_env(&mut self, keys: &[&str], lookup: impl Fn(&str) -> Option<String>) {
        for key in keys {
            if let Some(v) = lookup(&env_name(key)) {
                self.set(key, v.trim());
            }
        }
    }

    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown config key `{k}`"))),
            None => Ok(()),
        }
    }

    fn value<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("{key} = {v}: {e}"))),
        }
    }
}

impl fmt::Display for KeyValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

pub const DATA_KEYS: &[&str] = &[
    "data.vocab_size",
    "data.feat_dim",
    "data.frames_min",
    "data.frames_max",
    "data.noise",
    "data.len_min",
    "data.len_max",
    "data.train",
    "data.dev",
    "data.test",
    "data.seed",
    "data.frame_stack",
];

pub const RUN_KEYS: &[&str] = &[
    "model.variant",
    "model.dim",
    "model.heads",
    "model.encoder_layers",
    "model.decoder_layers",
    "model.ff_dim",
    "model.max_frames",
    "model.max_tokens",
    "train.prior",
    "train.ctc_weight",
    "train.epochs",
    "train.batch_size",
    "train.lr_scale",
    "train.warmup",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.clip_norm",
    "train.patience",
    "train.seed",
    "train.dev_limit",
    "train.dropout",
    "decode.mode",
];

fn all_keys() -> Vec<&'static str> {
    DATA_KEYS.iter().chain(RUN_KEYS).copied().collect()
}

/// Reads `path`, applies `INSCTC_*` overrides from the process environment
/// and rejects unknown keys.
pub fn load_with_env(path: &Path) -> Result<KeyValues> {
    let mut kv = KeyValues::load(path)?;
    let keys = all_keys();
    kv.apply_env(&keys, |name| std::env::var(name).ok());
    kv.reject_unknown(&keys)?;
    Ok(kv)
}

pub fn corpus_config(kv: &KeyValues) -> Result<CorpusConfig> {
    let d = CorpusConfig::default();
    let cfg = CorpusConfig {
        vocab_size: kv.value("data.vocab_size", d.vocab_size)?,
        feat_dim: kv.value("data.feat_dim", d.feat_dim)?,
        frames_min: kv.value("data.frames_min", d.frames_min)?,
        frames_max: kv.value("data.frames_max", d.frames_max)?,
        noise: kv.value("data.noise", d.noise)?,
        len_min: kv.value("data.len_min", d.len_min)?,
        len_max: kv.value("data.len_max", d.len_max)?,
        train: kv.value("data.train", d.train)?,
        dev: kv.value("data.dev", d.dev)?,
        test: kv.value("data.test", d.test)?,
        seed: kv.value("data.seed", d.seed)?,
        frame_stack: kv.value("data.frame_stack", d.frame_stack)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_scale: f64,
    pub warmup: usize,
    pub adam: AdamConfig,
    /// Epochs without dev improvement before stopping; `0` never stops early.
    pub patience: usize,
    pub seed: u64,
    /// Dev utterances scored after each epoch; `0` scores all.
    pub dev_limit: usize,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr_scale: 2.0,
            warmup: 200,
            adam: AdamConfig::default(),
            patience: 5,
            seed: 0,
            dev_limit: 0,
            dropout: 0.0,
        }
    }
}

/// Everything a training or decoding run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: CorpusConfig,
    pub model: ModelConfig,
    pub prior: Prior,
    pub decode: DecodeMode,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&load_with_env(path)?)
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let data = corpus_config(kv)?;
        let variant: Variant = kv.value("model.variant", Variant::Kermit)?;
        let base = ModelConfig::toy(variant, data.model_vocab_size(), data.feat_dim);
        let alpha_default = if variant == Variant::Ctc { 1.0 } else { 0.0 };
        let model = ModelConfig {
            variant,
            dim: kv.value("model.dim", base.dim)?,
            heads: kv.value("model.heads", base.heads)?,
            encoder_layers: kv.value("model.encoder_layers", base.encoder_layers)?,
            decoder_layers: kv.value("model.decoder_layers", base.decoder_layers)?,
            ff_dim: kv.value("model.ff_dim", base.ff_dim)?,
            vocab_size: data.model_vocab_size(),
            feat_dim: data.feat_dim,
            max_frames: kv.value("model.max_frames", data.max_frames().max(base.max_frames))?,
            max_tokens: kv.value("model.max_tokens", data.len_max)?,
            frame_stack: data.frame_stack,
            ctc_weight: CtcWeight::new(kv.value("train.ctc_weight", alpha_default)?)?,
        };
        let default_mode = match variant {
            Variant::At => DecodeMode::AtGreedy,
            Variant::Ctc => DecodeMode::CtcGreedy,
            Variant::Indigo => DecodeMode::GreedyInsertion,
            _ => DecodeMode::Parallel,
        };
        let d = TrainConfig::default();
        let train = TrainConfig {
            epochs: kv.value("train.epochs", d.epochs)?,
            batch_size: kv.value("train.batch_size", d.batch_size)?,
            lr_scale: kv.value("train.lr_scale", d.lr_scale)?,
            warmup: kv.value("train.warmup", d.warmup)?,
            adam: AdamConfig {
                beta1: kv.value("train.beta1", d.adam.beta1)?,
                beta2: kv.value("train.beta2", d.adam.beta2)?,
                eps: kv.value("train.eps", d.adam.eps)?,
                clip_norm: kv.value("train.clip_norm", d.adam.clip_norm)?,
            },
            patience: kv.value("train.patience", d.patience)?,
            seed: kv.value("train.seed", d.seed)?,
            dev_limit: kv.value("train.dev_limit", d.dev_limit)?,
            dropout: kv.value("train.dropout", d.dropout)?,
        };
        let cfg = RunConfig {
            data,
            model,
            prior: kv.value("train.prior", Prior::L2r)?,
            decode: kv.value("decode.mode", default_mode)?,
            train,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let v = self.model.variant;
        let alpha = self.model.ctc_weight.value();
        self.decode.check(v, alpha)?;
        let bad = |m: String| Err(Error::Config(m));
        match (v, self.prior) {
            (Variant::At, p) if p != Prior::L2r => return bad(format!("{v} trains left to right only, not {p}")),
            (Variant::Indigo, Prior::Bbt) => {
                return bad(format!("{v} has no slot scorer for balanced-tree training"))
            }
            _ => {}
        }
        if self.model.max_tokens < self.data.len_max {
            return bad(format!(
                "model.max_tokens {} is below data.len_max {}",
                self.model.max_tokens, self.data.len_max
            ));
        }
        if self.model.max_frames < self.data.max_frames() {
            return bad(format!(
                "model.max_frames {} is below the {} frames the corpus can produce",
                self.model.max_frames,
                self.data.max_frames()
            ));
        }
        if !(0.0..1.0).contains(&self.train.dropout) {
            return bad(format!("train.dropout {} is outside [0, 1)", self.train.dropout));
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        Ok(())
    }

    /// Flat listing of the resolved values, readable by [`RunConfig::from_kv`].
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        let pairs: Vec<(&str, String)> = vec![
            ("data.vocab_size", d.vocab_size.to_string()),
            ("data.feat_dim", d.feat_dim.to_string()),
            ("data.frames_min", d.frames_min.to_string()),
            ("data.frames_max", d.frames_max.to_string()),
            ("data.noise", d.noise.to_string()),
            ("data.len_min", d.len_min.to_string()),
            ("data.len_max", d.len_max.to_string()),
            ("data.train", d.train.to_string()),
            ("data.dev", d.dev.to_string()),
            ("data.test", d.test.to_string()),
            ("data.seed", d.seed.to_string()),
            ("data.frame_stack", d.frame_stack.to_string()),
            ("model.variant", m.variant.to_string()),
            ("model.dim", m.dim.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.encoder_layers", m.encoder_layers.to_string()),
            ("model.decoder_layers", m.decoder_layers.to_string()),
            ("model.ff_dim", m.ff_dim.to_string()),
            ("model.max_frames", m.max_frames.to_string()),
            ("model.max_tokens", m.max_tokens.to_string()),
            ("train.prior", self.prior.to_string()),
            ("train.ctc_weight", m.ctc_weight.value().to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr_scale", t.lr_scale.to_string()),
            ("train.warmup", t.warmup.to_string()),
            ("train.beta1", t.adam.beta1.to_string()),
            ("train.beta2", t.adam.beta2.to_string()),
            ("train.eps", t.adam.eps.to_string()),
            ("train.clip_norm", t.adam.clip_norm.to_string()),
            ("train.patience", t.patience.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.dev_limit", t.dev_limit.to_string()),
            ("train.dropout", t.dropout.to_string()),
            ("decode.mode", self.decode.to_string()),
        ];
        for (k, v) in pairs {
            kv.set(k, &v);
        }
        kv
    }
}
