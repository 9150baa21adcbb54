//! Flat `key=value` configuration files and the typed configs built from
//! them. Every key has a default; unknown keys are rejected. Defaults are
//! the full-scale training profile; `configs/desk.cfg` ships a small CPU
//! profile for quick runs and CI.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignalKind {
    Surprisal,
    Mcd,
    Bae,
}

impl SignalKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "surprisal" => Ok(SignalKind::Surprisal),
            "mcd" => Ok(SignalKind::Mcd),
            "bae" => Ok(SignalKind::Bae),
            other => Err(Error::Invalid(format!(
                "unknown signal.kind '{other}' (expected surprisal|mcd|bae)"
            ))),
        }
    }
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SignalKind::Surprisal => "surprisal",
            SignalKind::Mcd => "mcd",
            SignalKind::Bae => "bae",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    Fixed,
    Learned,
    Predicted,
}

impl StepKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(StepKind::Fixed),
            "learned" => Ok(StepKind::Learned),
            "predicted" => Ok(StepKind::Predicted),
            other => Err(Error::Invalid(format!(
                "unknown recoding.step_kind '{other}' (expected fixed|learned|predicted)"
            ))),
        }
    }
}

/// Error-signal configuration and its sampling hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalConfig {
    pub kind: SignalKind,
    /// Sample count K (dropout masks or ensemble members).
    pub k: usize,
    /// Drop probability for the signal's decoder masks.
    pub mc_dropout: f64,
    /// Std-dev of the ensemble weight/anchor prior.
    pub prior_scale: f64,
    /// Weight decay constant of the anchor pull.
    pub weight_decay: f64,
    /// Amortized variant: one shared anchor draw for all members.
    pub single_anchor: bool,
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig {
            kind: SignalKind::Surprisal,
            k: 15,
            mc_dropout: 0.42,
            prior_scale: 0.29,
            weight_decay: 4.82e-5,
            single_anchor: true,
        }
    }
}

/// Recoding on/off plus the step-size strategy settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecodingConfig {
    pub enabled: bool,
    pub step_kind: StepKind,
    /// Global step size; replicated per (layer, activation kind) for the
    /// fixed strategy and used as the initial value for the learned one.
    pub alpha: f64,
    /// Per-(layer, kind) fixed overrides from `recoding.alpha.<l>.<h|c>`.
    /// Kind index 0 = hidden, 1 = cell.
    pub alpha_overrides: Vec<(usize, usize, f64)>,
}

impl Default for RecodingConfig {
    fn default() -> Self {
        RecodingConfig {
            enabled: false,
            step_kind: StepKind::Fixed,
            alpha: 0.001,
            alpha_overrides: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub layers: usize,
    pub emb_size: usize,
    pub hidden_size: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub seq_len: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
    pub min_count: usize,
    pub recoding: RecodingConfig,
    pub signal: SignalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            layers: 2,
            emb_size: 650,
            hidden_size: 650,
            batch_size: 64,
            lr: 20.0,
            clip: 0.25,
            seq_len: 35,
            epochs: 8,
            dropout: 0.15,
            seed: 42,
            min_count: 1,
            recoding: RecodingConfig::default(),
            signal: SignalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        fn bad(msg: &str) -> Error {
            Error::Invalid(format!("invalid config: {msg}"))
        }
        if self.layers == 0
            || self.emb_size == 0
            || self.hidden_size == 0
            || self.batch_size == 0
            || self.seq_len == 0
            || self.epochs == 0
            || self.min_count == 0
        {
            return Err(bad("all counts must be >= 1"));
        }
        if !(self.lr > 0.0) || !(self.clip > 0.0) {
            return Err(bad("lr and clip must be > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(bad("dropout must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.signal.mc_dropout) {
            return Err(bad("signal.mc_dropout must lie in [0, 1)"));
        }
        if self.signal.k == 0 {
            return Err(bad("signal.k must be >= 1"));
        }
        if self.recoding.alpha < 0.0 {
            return Err(bad("recoding.alpha must be >= 0"));
        }
        for &(layer, kind, alpha) in &self.recoding.alpha_overrides {
            if layer >= self.layers || kind > 1 || alpha < 0.0 {
                return Err(bad("recoding.alpha.<layer>.<h|c> override out of range"));
            }
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_keys(&text)
    }

    pub fn from_str_keys(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Invalid(format!("config line {}: expected key=value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.insert(key.to_string(), ()).is_some() {
                return Err(Error::Invalid(format!("config: duplicate key '{key}'")));
            }
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Invalid(format!("config: bad value '{value}' for '{key}'")))
        }
        fn parse_bool(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(Error::Invalid(format!(
                    "config: bad boolean '{value}' for '{key}'"
                ))),
            }
        }
        match key {
            "layers" => self.layers = parse(key, value)?,
            "emb_size" => self.emb_size = parse(key, value)?,
            "hidden_size" => self.hidden_size = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "clip" => self.clip = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "min_count" => self.min_count = parse(key, value)?,
            "recoding.enabled" => self.recoding.enabled = parse_bool(key, value)?,
            "recoding.step_kind" => self.recoding.step_kind = StepKind::parse(value)?,
            "recoding.alpha" => self.recoding.alpha = parse(key, value)?,
            "signal.kind" => self.signal.kind = SignalKind::parse(value)?,
            "signal.k" => self.signal.k = parse(key, value)?,
            "signal.mc_dropout" => self.signal.mc_dropout = parse(key, value)?,
            "signal.prior_scale" => self.signal.prior_scale = parse(key, value)?,
            "signal.weight_decay" => self.signal.weight_decay = parse(key, value)?,
            "signal.bae_single_anchor" => self.signal.single_anchor = parse_bool(key, value)?,
            other => {
                // recoding.alpha.<layer>.<h|c>
                if let Some(rest) = other.strip_prefix("recoding.alpha.") {
                    let (layer_s, kind_s) = rest
                        .split_once('.')
                        .ok_or_else(|| Error::Invalid(format!("config: bad key '{other}'")))?;
                    let layer: usize = parse(other, layer_s)?;
                    let kind = match kind_s {
                        "h" => 0,
                        "c" => 1,
                        _ => {
                            return Err(Error::Invalid(format!(
                                "config: '{other}' must end in .h or .c"
                            )))
                        }
                    };
                    let alpha: f64 = parse(other, value)?;
                    self.recoding.alpha_overrides.push((layer, kind, alpha));
                } else {
                    return Err(Error::Invalid(format!("config: unknown key '{other}'")));
                }
            }
        }
        Ok(())
    }
}
