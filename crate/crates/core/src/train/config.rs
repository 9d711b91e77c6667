use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ardl::ArdlConvention;
use crate::error::{Error, Result};
use crate::losses::{GanVariant, LossWeights};

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_convention(value: &str) -> Result<ArdlConvention> {
    match value {
        "as-printed" => Ok(ArdlConvention::AsPrinted),
        "standard" => Ok(ArdlConvention::Standard),
        _ => Err(Error::Config(format!("ardl.convention: expected as-printed or standard, got {value:?}"))),
    }
}

fn parse_variant(value: &str) -> Result<GanVariant> {
    match value {
        "non-saturating" => Ok(GanVariant::NonSaturating),
        "saturating" => Ok(GanVariant::Saturating),
        _ => Err(Error::Config(format!("gan.variant: expected non-saturating or saturating, got {value:?}"))),
    }
}

/// Network hyperparameters other than the image size, which always comes
/// from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub texture_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub codeword_dim: usize,
}

/// Identity-network pretraining. Profiles with `|yaw| <= max_yaw` degrees
/// join the frontal images in the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_yaw: f64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            max_yaw: 30.0,
        }
    }
}

impl PretrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 || !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(
                "pretraining needs batch_size >= 1 and a positive learning rate".into(),
            ));
        }
        if !(self.max_yaw >= 0.0) {
            return Err(Error::Config(format!("pretrain.max_yaw must be >= 0, got {}", self.max_yaw)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    /// Pretrained identity network; pretrained on the dataset when absent.
    pub identity_net: Option<PathBuf>,
    pub batch_size: usize,
    pub max_iter: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// 64-bit arithmetic, used for exact resume.
    pub deterministic: bool,
    pub weights: LossWeights,
    pub network: NetworkParams,
    pub ardl_convention: ArdlConvention,
    pub ardl_codewords: usize,
    pub gan_variant: GanVariant,
    pub pretrain: PretrainOptions,
    /// Compare parameter checksums around every phase of every step.
    pub verify_isolation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            identity_net: None,
            batch_size: 8,
            max_iter: 2000,
            learning_rate: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.99,
            seed: 0,
            checkpoint_every: 500,
            deterministic: false,
            weights: LossWeights::default(),
            network: NetworkParams {
                texture_channels: 32,
                base_width: 8,
                depth: 4,
                codeword_dim: 32,
            },
            ardl_convention: ArdlConvention::AsPrinted,
            ardl_codewords: 32,
            gan_variant: GanVariant::NonSaturating,
            pretrain: PretrainOptions::default(),
            verify_isolation: false,
        }
    }
}

pub const CONFIG_KEYS: [&str; 27] = [
    "dataset",
    "identity_net",
    "batch_size",
    "max_iter",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "seed",
    "checkpoint_every",
    "deterministic",
    "weights.rec",
    "weights.corr",
    "weights.adv",
    "weights.p",
    "weights.g",
    "network.texture_channels",
    "network.base_width",
    "network.depth",
    "network.codeword_dim",
    "ardl.convention",
    "ardl.codewords",
    "gan.variant",
    "pretrain.epochs",
    "pretrain.learning_rate",
    "pretrain.batch_size",
    "pretrain.max_yaw",
    "verify_isolation",
];

impl TrainConfig {
    /// Sets one dot-path key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = PathBuf::from(value),
            "identity_net" => self.identity_net = (!value.is_empty()).then(|| PathBuf::from(value)),
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_iter" => self.max_iter = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            "weights.rec" => self.weights.rec = parse(key, value)?,
            "weights.corr" => self.weights.corr = parse(key, value)?,
            "weights.adv" => self.weights.adv = parse(key, value)?,
            "weights.p" => self.weights.p = parse(key, value)?,
            "weights.g" => self.weights.g = parse(key, value)?,
            "network.texture_channels" => self.network.texture_channels = parse(key, value)?,
            "network.base_width" => self.network.base_width = parse(key, value)?,
            "network.depth" => self.network.depth = parse(key, value)?,
            "network.codeword_dim" => self.network.codeword_dim = parse(key, value)?,
            "ardl.convention" => self.ardl_convention = parse_convention(value)?,
            "ardl.codewords" => self.ardl_codewords = parse(key, value)?,
            "gan.variant" => self.gan_variant = parse_variant(value)?,
            "pretrain.epochs" => self.pretrain.epochs = parse(key, value)?,
            "pretrain.learning_rate" => self.pretrain.learning_rate = parse(key, value)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse(key, value)?,
            "pretrain.max_yaw" => self.pretrain.max_yaw = parse(key, value)?,
            "verify_isolation" => self.verify_isolation = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, entries: &[(String, String)]) -> Result<()> {
        for (k, v) in entries {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&parse_kv(text)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Every key with its current value, in [`CONFIG_KEYS`] order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let convention = match self.ardl_convention {
            ArdlConvention::AsPrinted => "as-printed",
            ArdlConvention::Standard => "standard",
        };
        let variant = match self.gan_variant {
            GanVariant::NonSaturating => "non-saturating",
            GanVariant::Saturating => "saturating",
        };
        let values = [
            self.dataset.display().to_string(),
            self.identity_net.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            self.batch_size.to_string(),
            self.max_iter.to_string(),
            format!("{:?}", self.learning_rate),
            format!("{:?}", self.adam_beta1),
            format!("{:?}", self.adam_beta2),
            self.seed.to_string(),
            self.checkpoint_every.to_string(),
            self.deterministic.to_string(),
            format!("{:?}", self.weights.rec),
            format!("{:?}", self.weights.corr),
            format!("{:?}", self.weights.adv),
            format!("{:?}", self.weights.p),
            format!("{:?}", self.weights.g),
            self.network.texture_channels.to_string(),
            self.network.base_width.to_string(),
            self.network.depth.to_string(),
            self.network.codeword_dim.to_string(),
            convention.to_string(),
            self.ardl_codewords.to_string(),
            variant.to_string(),
            self.pretrain.epochs.to_string(),
            format!("{:?}", self.pretrain.learning_rate),
            self.pretrain.batch_size.to_string(),
            format!("{:?}", self.pretrain.max_yaw),
            self.verify_isolation.to_string(),
        ];
        CONFIG_KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (k, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{k} must be in [0, 1), got {b}"));
            }
        }
        if self.checkpoint_every < 1 {
            return bad("checkpoint_every must be >= 1".into());
        }
        let w = &self.weights;
        if [w.rec, w.corr, w.adv, w.p, w.g].iter().any(|x| !x.is_finite()) {
            return bad("loss weights must be finite".into());
        }
        if self.ardl_codewords < 2 {
            return bad("ardl.codewords must be >= 2".into());
        }
        self.pretrain.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.set("weights.adv", "0").unwrap();
        cfg.set("ardl.convention", "standard").unwrap();
        cfg.set("identity_net", "phi").unwrap();
        cfg.set("learning_rate", "0.0003").unwrap();
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(TrainConfig::from_text("batch_sise = 4"), Err(Error::Config(_))));
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = TrainConfig::from_text("# desk\n\nmax_iter = 7 # short\n seed=3\n").unwrap();
        assert_eq!((cfg.max_iter, cfg.seed), (7, 3));
    }

    #[test]
    fn invariants_checked() {
        assert!(TrainConfig::from_text("batch_size = 0").is_err());
        assert!(TrainConfig::from_text("learning_rate = 0").is_err());
        assert!(TrainConfig::from_text("adam_beta2 = 1.0").is_err());
        assert!(TrainConfig::from_text("max_iter = -1").is_err());
        assert!(TrainConfig::from_text("no equals sign").is_err());
    }

    #[test]
    fn defaults_follow_optimizer_settings() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2), (1e-4, 0.5, 0.99));
        assert_eq!(cfg.weights, LossWeights::default());
        assert_eq!(cfg.entries().len(), CONFIG_KEYS.len());
    }
}
