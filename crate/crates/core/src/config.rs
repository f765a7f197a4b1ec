//! Training configuration and its flat `key = value` text form.
//!
//! ```text
//! # comments start with '#'
//! epochs = 20
//! adversary.beta = 1.0
//! model.channels = 16,32,64
//! ```
//!
//! Unknown and repeated keys are rejected; missing keys keep their defaults.
//! When `loss.margin` is absent it follows `loss.kind` (arcface 0.5,
//! cosface 0.35, softmax 0).

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adversary::{AdversaryConfig, AdversaryMode};
use crate::backbone::ArchSpec;
use crate::error::{Error, Result};
use crate::margin::{MarginKind, MarginSpec};
use crate::recognizability::DEFAULT_MOMENTUM;
use crate::tensor::DType;

/// Which embedding the entropy score reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyInput {
    /// `E2` output before ℓ2 normalization.
    Raw,
    Normalized,
}

impl FromStr for EntropyInput {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "raw" => Ok(EntropyInput::Raw),
            "normalized" => Ok(EntropyInput::Normalized),
            other => Err(format!("unknown entropy input `{other}` (expected raw or normalized)")),
        }
    }
}

impl EntropyInput {
    pub fn as_str(self) -> &'static str {
        match self {
            EntropyInput::Raw => "raw",
            EntropyInput::Normalized => "normalized",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub ranks: Vec<usize>,
    pub far_targets: Vec<f64>,
    pub swap_seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            ranks: vec![1, 5],
            far_targets: vec![0.01, 0.1],
            swap_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub sgd_momentum: f64,
    pub ema_alpha: f64,
    pub ur_top_k: usize,
    pub styled_loss_weight: f64,
    pub entropy_input: EntropyInput,
    pub seed: u64,
    pub dtype: DType,
    pub deterministic: bool,
    /// Hash model parameters around stage 1 every iteration.
    pub purity_check: bool,
    pub adversary: AdversaryConfig,
    pub loss: MarginSpec,
    pub arch: ArchSpec,
    pub eval: EvalSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 0.05,
            lr_decay_epochs: vec![10, 16],
            lr_decay_factor: 0.1,
            weight_decay: 1e-4,
            sgd_momentum: 0.9,
            ema_alpha: DEFAULT_MOMENTUM,
            ur_top_k: 8,
            styled_loss_weight: 0.5,
            entropy_input: EntropyInput::Raw,
            seed: 0,
            dtype: DType::F32,
            deterministic: false,
            purity_check: false,
            adversary: AdversaryConfig::default(),
            loss: MarginSpec::arcface(),
            arch: ArchSpec::default(),
            eval: EvalSettings::default(),
        }
    }
}

fn default_margin(kind: MarginKind) -> f64 {
    match kind {
        MarginKind::ArcFace => MarginSpec::arcface().margin,
        MarginKind::CosFace => MarginSpec::cosface().margin,
        MarginKind::Softmax => 0.0,
    }
}

pub const KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "lr",
    "lr_decay_epochs",
    "lr_decay_factor",
    "weight_decay",
    "sgd_momentum",
    "ema_alpha",
    "ur_top_k",
    "styled_loss_weight",
    "ur.entropy_on",
    "seed",
    "dtype",
    "deterministic",
    "debug.purity_check",
    "adversary.mode",
    "adversary.k",
    "adversary.step",
    "adversary.beta",
    "adversary.rule",
    "loss.kind",
    "loss.margin",
    "loss.scale",
    "model.channels",
    "model.strides",
    "model.split",
    "model.embed_dim",
    "eval.ranks",
    "eval.far",
    "eval.swap_seed",
];

fn parse_value<V: FromStr>(line: usize, key: &str, raw: &str, expected: &str) -> Result<V> {
    raw.parse().map_err(|_| Error::Config {
        line,
        key: key.to_string(),
        msg: format!("expected {expected}, got `{raw}`"),
    })
}

fn parse_enum<V: FromStr<Err = String>>(line: usize, key: &str, raw: &str) -> Result<V> {
    raw.parse().map_err(|msg| Error::Config {
        line,
        key: key.to_string(),
        msg,
    })
}

fn parse_list<V: FromStr>(line: usize, key: &str, raw: &str, expected: &str) -> Result<Vec<V>> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|p| parse_value(line, key, p.trim(), &format!("comma-separated list of {expected}")))
        .collect()
}

fn join<V: ToString>(v: &[V]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Published full-scale schedule: lr 0.1, 24 epochs, batch 512, decay at
    /// epochs 10, 16 and 22.
    pub fn paper() -> Self {
        Self {
            epochs: 24,
            batch_size: 512,
            lr: 0.1,
            lr_decay_epochs: vec![10, 16, 22],
            ..Self::default()
        }
    }

    /// Short synthetic-benchmark schedule at logit scale 16. At scale 64 the
    /// small bias-free backbone collapses every embedding onto one direction.
    pub fn bench() -> Self {
        Self {
            epochs: 8,
            lr: 0.005,
            lr_decay_epochs: vec![5, 7],
            loss: MarginSpec {
                scale: 16.0,
                ..MarginSpec::arcface()
            },
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "paper" => Ok(Self::paper()),
            "bench" => Ok(Self::bench()),
            other => Err(Error::Invalid(format!("unknown preset `{other}` (expected desk, paper or bench)"))),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_onto(Self::default(), text)
    }

    /// Applies the assignments in `text` on top of `base`.
    pub fn parse_onto(base: Self, text: &str) -> Result<Self> {
        let mut cfg = base;
        let mut seen = std::collections::HashSet::new();
        let mut margin_set = false;
        for (i, raw_line) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw_line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config {
                    line,
                    key: content.to_string(),
                    msg: "expected `key = value`".into(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config {
                    line,
                    key: key.into(),
                    msg: "key appears more than once".into(),
                });
            }
            if key == "loss.margin" {
                margin_set = true;
            }
            cfg.set(line, key, value)?;
        }
        if !margin_set && seen.contains("loss.kind") {
            cfg.loss.margin = default_margin(cfg.loss.kind);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Assigns one key.
    pub fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        const INT: &str = "non-negative integer";
        const FLOAT: &str = "number";
        match key {
            "epochs" => self.epochs = parse_value(line, key, v, INT)?,
            "batch_size" => self.batch_size = parse_value(line, key, v, INT)?,
            "lr" => self.lr = parse_value(line, key, v, FLOAT)?,
            "lr_decay_epochs" => self.lr_decay_epochs = parse_list(line, key, v, "integers")?,
            "lr_decay_factor" => self.lr_decay_factor = parse_value(line, key, v, FLOAT)?,
            "weight_decay" => self.weight_decay = parse_value(line, key, v, FLOAT)?,
            "sgd_momentum" => self.sgd_momentum = parse_value(line, key, v, FLOAT)?,
            "ema_alpha" => self.ema_alpha = parse_value(line, key, v, FLOAT)?,
            "ur_top_k" => self.ur_top_k = parse_value(line, key, v, INT)?,
            "styled_loss_weight" => self.styled_loss_weight = parse_value(line, key, v, FLOAT)?,
            "ur.entropy_on" => self.entropy_input = parse_enum(line, key, v)?,
            "seed" => self.seed = parse_value(line, key, v, INT)?,
            "dtype" => self.dtype = parse_enum(line, key, v)?,
            "deterministic" => self.deterministic = parse_value(line, key, v, "true or false")?,
            "debug.purity_check" => self.purity_check = parse_value(line, key, v, "true or false")?,
            "adversary.mode" => self.adversary.mode = parse_enum(line, key, v)?,
            "adversary.k" => self.adversary.pgd_steps = parse_value(line, key, v, INT)?,
            "adversary.step" => self.adversary.pgd_step_size = parse_value(line, key, v, FLOAT)?,
            "adversary.beta" => self.adversary.beta = parse_value(line, key, v, FLOAT)?,
            "adversary.rule" => self.adversary.rule = parse_enum(line, key, v)?,
            "loss.kind" => self.loss.kind = parse_enum(line, key, v)?,
            "loss.margin" => self.loss.margin = parse_value(line, key, v, FLOAT)?,
            "loss.scale" => self.loss.scale = parse_value(line, key, v, FLOAT)?,
            "model.channels" => self.arch.channels = parse_list(line, key, v, "integers")?,
            "model.strides" => self.arch.strides = parse_list(line, key, v, "integers")?,
            "model.split" => self.arch.split = parse_value(line, key, v, INT)?,
            "model.embed_dim" => self.arch.embed_dim = parse_value(line, key, v, INT)?,
            "eval.ranks" => self.eval.ranks = parse_list(line, key, v, "integers")?,
            "eval.far" => self.eval.far_targets = parse_list(line, key, v, "numbers")?,
            "eval.swap_seed" => self.eval.swap_seed = parse_value(line, key, v, INT)?,
            other => {
                return Err(Error::Config {
                    line,
                    key: other.to_string(),
                    msg: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Every key, in [`KEYS`] order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", self.lr.to_string());
        put("lr_decay_epochs", join(&self.lr_decay_epochs));
        put("lr_decay_factor", self.lr_decay_factor.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("sgd_momentum", self.sgd_momentum.to_string());
        put("ema_alpha", self.ema_alpha.to_string());
        put("ur_top_k", self.ur_top_k.to_string());
        put("styled_loss_weight", self.styled_loss_weight.to_string());
        put("ur.entropy_on", self.entropy_input.as_str().into());
        put("seed", self.seed.to_string());
        put("dtype", self.dtype.to_string());
        put("deterministic", self.deterministic.to_string());
        put("debug.purity_check", self.purity_check.to_string());
        put("adversary.mode", self.adversary.mode.to_string());
        put("adversary.k", self.adversary.pgd_steps.to_string());
        put("adversary.step", self.adversary.pgd_step_size.to_string());
        put("adversary.beta", self.adversary.beta.to_string());
        put("adversary.rule", self.adversary.rule.to_string());
        put("loss.kind", self.loss.kind.to_string());
        put("loss.margin", self.loss.margin.to_string());
        put("loss.scale", self.loss.scale.to_string());
        put("model.channels", join(&self.arch.channels));
        put("model.strides", join(&self.arch.strides));
        put("model.split", self.arch.split.to_string());
        put("model.embed_dim", self.arch.embed_dim.to_string());
        put("eval.ranks", join(&self.eval.ranks));
        put("eval.far", join(&self.eval.far_targets));
        put("eval.swap_seed", self.eval.swap_seed.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} must be at least 2", self.batch_size));
        }
        if self.ur_top_k == 0 || self.ur_top_k > self.batch_size {
            return bad(format!("ur_top_k {} outside 1..={}", self.ur_top_k, self.batch_size));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay_factor > 0.0) {
            return bad(format!("lr_decay_factor must be positive, got {}", self.lr_decay_factor));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return bad(format!("sgd_momentum {} outside [0, 1)", self.sgd_momentum));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return bad(format!("ema_alpha {} outside [0, 1]", self.ema_alpha));
        }
        if !(0.0..=1.0).contains(&self.styled_loss_weight) {
            return bad(format!("styled_loss_weight {} outside [0, 1]", self.styled_loss_weight));
        }
        if self.eval.ranks.iter().any(|&r| r == 0) {
            return bad("eval.ranks must be positive".into());
        }
        if self.eval.far_targets.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return bad("eval.far targets must lie in (0, 1]".into());
        }
        self.adversary.validate()?;
        self.loss.validate()?;
        self.arch.validate()?;
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }

    pub fn uses_unlabeled(&self) -> bool {
        self.adversary.mode == AdversaryMode::Targeted
    }
}
