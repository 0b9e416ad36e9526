//! Line-oriented `key = value` training configuration.

use std::fs;
use std::path::Path;

use crate::corpus::DEFAULT_MAX_VOCAB;
use crate::error::{DvamError, Result};
use crate::model::{LatentKind, ModelConfig};
use crate::prior::{PriorConfig, DEFAULT_CHANNELS, DEFAULT_KERNEL, DEFAULT_LAYERS};
use crate::quantizer::{DEFAULT_DEAD_THRESHOLD, DEFAULT_EMA_DECAY};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub kind: LatentKind,
    pub model: ModelConfig,
    pub prior_channels: usize,
    pub prior_layers: usize,
    pub prior_kernel: usize,
    pub prior_gated: bool,
    /// Code grid length; 0 picks longest training sentence + 1.
    pub prior_t_max: usize,
    pub prior_max_epochs: usize,

    pub beta_start: f64,
    pub beta_max: f64,
    pub warmup_epochs: usize,
    pub ramp_epochs: usize,

    pub lr: f64,
    pub lr_decay_factor: f64,
    pub patience_epochs: usize,
    pub max_decays: usize,
    /// Joint gradient L2 norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,

    pub ema_decay: f64,
    pub dead_threshold: f64,
    pub max_vocab: usize,
    pub min_freq: usize,
    /// Sentences per independently differentiated work item.
    pub shard_size: usize,
    /// Free-running decode cap; 0 picks twice the longest training sentence.
    pub gen_max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            kind: LatentKind::Discrete,
            model: ModelConfig::default(),
            prior_channels: DEFAULT_CHANNELS,
            prior_layers: DEFAULT_LAYERS,
            prior_kernel: DEFAULT_KERNEL,
            prior_gated: true,
            prior_t_max: 0,
            prior_max_epochs: 100,
            beta_start: 0.1,
            beta_max: 5.0,
            warmup_epochs: 30,
            ramp_epochs: 10,
            lr: 1.0,
            lr_decay_factor: 0.5,
            patience_epochs: 2,
            max_decays: 5,
            grad_clip: 5.0,
            batch_size: 32,
            max_epochs: 100,
            seed: 1,
            ema_decay: DEFAULT_EMA_DECAY,
            dead_threshold: DEFAULT_DEAD_THRESHOLD,
            max_vocab: DEFAULT_MAX_VOCAB,
            min_freq: 1,
            shard_size: 8,
            gen_max_len: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| DvamError::Config(format!("bad value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(DvamError::Config(format!("bad boolean {v:?} for {key}"))),
    }
}

impl TrainConfig {
    pub fn prior(&self) -> PriorConfig {
        PriorConfig {
            code_count: self.model.code_count,
            channels: self.prior_channels,
            layers: self.prior_layers,
            kernel: self.prior_kernel,
            gated: self.prior_gated,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.prior().validate()?;
        if self.beta_start > self.beta_max || self.beta_start < 0.0 {
            return Err(DvamError::Config("need 0 <= beta_start <= beta_max".into()));
        }
        if self.patience_epochs < 1 {
            return Err(DvamError::Config("patience_epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(DvamError::Config("need lr > 0 and 0 < lr_decay_factor <= 1".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(DvamError::Config("grad_clip must be >= 0".into()));
        }
        if self.batch_size == 0 || self.shard_size == 0 {
            return Err(DvamError::Config("batch_size and shard_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(DvamError::Config("ema_decay must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "model" => self.kind = v.parse()?,
            "vocab_size" => m.vocab_size = parse_num(key, v)?,
            "embed_dim" => m.embed_dim = parse_num(key, v)?,
            "enc_hidden" => m.enc_hidden = parse_num(key, v)?,
            "dec_hidden" => m.dec_hidden = parse_num(key, v)?,
            "code_dim" => m.code_dim = parse_num(key, v)?,
            "code_count" => m.code_count = parse_num(key, v)?,
            "attn_width" => m.attn_width = parse_num(key, v)?,
            "context_to_input" => m.context_to_input = parse_bool(key, v)?,
            "context_to_head" => m.context_to_head = parse_bool(key, v)?,
            "init_scale" => m.init_scale = parse_num(key, v)?,
            "prior_channels" => self.prior_channels = parse_num(key, v)?,
            "prior_layers" => self.prior_layers = parse_num(key, v)?,
            "prior_kernel" => self.prior_kernel = parse_num(key, v)?,
            "prior_gated" => self.prior_gated = parse_bool(key, v)?,
            "prior_t_max" => self.prior_t_max = parse_num(key, v)?,
            "prior_max_epochs" => self.prior_max_epochs = parse_num(key, v)?,
            "beta_start" => self.beta_start = parse_num(key, v)?,
            "beta_max" => self.beta_max = parse_num(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse_num(key, v)?,
            "ramp_epochs" => self.ramp_epochs = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "lr_decay_factor" => self.lr_decay_factor = parse_num(key, v)?,
            "patience_epochs" => self.patience_epochs = parse_num(key, v)?,
            "max_decays" => self.max_decays = parse_num(key, v)?,
            "grad_clip" => self.grad_clip = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "max_epochs" => self.max_epochs = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "ema_decay" => self.ema_decay = parse_num(key, v)?,
            "dead_threshold" => self.dead_threshold = parse_num(key, v)?,
            "max_vocab" => self.max_vocab = parse_num(key, v)?,
            "min_freq" => self.min_freq = parse_num(key, v)?,
            "shard_size" => self.shard_size = parse_num(key, v)?,
            "gen_max_len" => self.gen_max_len = parse_num(key, v)?,
            _ => return Err(DvamError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DvamError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| DvamError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| DvamError::Config(format!("{}: {e}", path.display())))?;
        TrainConfig::parse(&text)
    }

    /// Every key in a fixed order; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let entries: Vec<(&str, String)> = vec![
            ("model", self.kind.name().to_string()),
            ("vocab_size", m.vocab_size.to_string()),
            ("embed_dim", m.embed_dim.to_string()),
            ("enc_hidden", m.enc_hidden.to_string()),
            ("dec_hidden", m.dec_hidden.to_string()),
            ("code_dim", m.code_dim.to_string()),
            ("code_count", m.code_count.to_string()),
            ("attn_width", m.attn_width.to_string()),
            ("context_to_input", m.context_to_input.to_string()),
            ("context_to_head", m.context_to_head.to_string()),
            ("init_scale", format!("{:?}", m.init_scale)),
            ("prior_channels", self.prior_channels.to_string()),
            ("prior_layers", self.prior_layers.to_string()),
            ("prior_kernel", self.prior_kernel.to_string()),
            ("prior_gated", self.prior_gated.to_string()),
            ("prior_t_max", self.prior_t_max.to_string()),
            ("prior_max_epochs", self.prior_max_epochs.to_string()),
            ("beta_start", format!("{:?}", self.beta_start)),
            ("beta_max", format!("{:?}", self.beta_max)),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("ramp_epochs", self.ramp_epochs.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("lr_decay_factor", format!("{:?}", self.lr_decay_factor)),
            ("patience_epochs", self.patience_epochs.to_string()),
            ("max_decays", self.max_decays.to_string()),
            ("grad_clip", format!("{:?}", self.grad_clip)),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("ema_decay", format!("{:?}", self.ema_decay)),
            ("dead_threshold", format!("{:?}", self.dead_threshold)),
            ("max_vocab", self.max_vocab.to_string()),
            ("min_freq", self.min_freq.to_string()),
            ("shard_size", self.shard_size.to_string()),
            ("gen_max_len", self.gen_max_len.to_string()),
        ];
        entries
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Commitment weight for a 0-based epoch: `beta_start` through the warmup,
    /// then a linear ramp to `beta_max` over `ramp_epochs`, then constant.
    pub fn beta(&self, epoch: usize) -> f64 {
        beta_schedule(self.beta_start, self.beta_max, self.warmup_epochs, self.ramp_epochs, epoch)
    }
}

pub fn beta_schedule(start: f64, max: f64, warmup: usize, ramp: usize, epoch: usize) -> f64 {
    if epoch <= warmup {
        return start;
    }
    if ramp == 0 {
        return max;
    }
    let frac = (epoch - warmup) as f64 / ramp as f64;
    (start + (max - start) * frac).clamp(start, max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut c = TrainConfig::default();
        c.kind = LatentKind::Gaussian;
        c.model.code_count = 16;
        c.lr = 0.3;
        c.ema_decay = 0.95;
        c.prior_gated = false;
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = TrainConfig::parse("lr = 1.0\nfoo = 3\n").unwrap_err();
        assert!(matches!(err, DvamError::Config(ref m) if m.contains("foo")));
        assert!(TrainConfig::parse("lr 1.0").is_err());
        assert!(TrainConfig::parse("lr = abc").is_err());
    }

    #[test]
    fn comments_and_blanks() {
        let c = TrainConfig::parse("# hi\n\ncode_count = 16  # small\n").unwrap();
        assert_eq!(c.model.code_count, 16);
    }

    #[test]
    fn beta_schedule_shape() {
        let c = TrainConfig::default();
        assert_eq!(c.beta(0), 0.1);
        assert_eq!(c.beta(30), 0.1);
        assert!((c.beta(35) - 2.55).abs() < 1e-12);
        assert_eq!(c.beta(40), 5.0);
        assert_eq!(c.beta(400), 5.0);
    }
}
