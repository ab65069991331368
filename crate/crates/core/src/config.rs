//! Hyperparameters and their flat `key=value` form.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};

/// Regularizer applied to the stack of branch attention maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegularizerKind {
    /// Multi-Attention Dropping: one whole map per sample, no rescaling.
    Mad,
    Dropout,
    DropBlock,
    SpatialDropout,
}

impl RegularizerKind {
    pub const ALL: [RegularizerKind; 4] = [
        RegularizerKind::Mad,
        RegularizerKind::Dropout,
        RegularizerKind::DropBlock,
        RegularizerKind::SpatialDropout,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RegularizerKind::Mad => "mad",
            RegularizerKind::Dropout => "dropout",
            RegularizerKind::DropBlock => "dropblock",
            RegularizerKind::SpatialDropout => "spatial",
        }
    }
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegularizerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::usage(format!("unknown regularizer_kind {s:?}")))
    }
}

/// Every knob of a training run, including the synthetic data it trains on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub input_size: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    /// Stem stage whose output feeds the rest of the model (2, 3 or 4).
    pub stage: usize,
    /// Disables the LANet branches entirely (the ablation baseline).
    pub local_cnns: bool,
    /// Number of LANet branches `B`.
    pub branches: usize,
    pub reduction: usize,
    /// MAD drop rate on the branch attention maps.
    pub p1: f64,
    /// MSAD drop rate on the attention heads of every encoder block.
    pub p2: f64,
    pub embed_dim: usize,
    /// Attention heads `k`.
    pub heads: usize,
    /// Encoder blocks `M`.
    pub depth: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling applied before each step; 0 disables it.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub seed: u64,
    pub regularizer_kind: RegularizerKind,
    /// DropBlock square size, only used with [`RegularizerKind::DropBlock`].
    pub block_size: usize,
    pub augment: bool,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub log_drops: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            input_size: 48,
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: 2,
            stage: 3,
            local_cnns: true,
            branches: 2,
            reduction: 4,
            p1: 0.6,
            p2: 0.3,
            embed_dim: 128,
            heads: 8,
            depth: 4,
            mlp_hidden: 256,
            num_classes: 7,
            lr: 0.03,
            momentum: 0.9,
            grad_clip: 1.0,
            batch_size: 32,
            epochs: 30,
            lr_decay_epochs: vec![20, 27],
            lr_decay_factor: 10.0,
            seed: 0,
            regularizer_kind: RegularizerKind::Mad,
            block_size: 3,
            augment: true,
            train_per_class: 100,
            test_per_class: 50,
            log_drops: false,
        }
    }
}

/// Config keys in serialization order.
pub const KEYS: &[&str] = &[
    "input_size",
    "stage_channels",
    "blocks_per_stage",
    "stage",
    "local_cnns",
    "B",
    "reduction",
    "p1",
    "p2",
    "embed_dim",
    "k",
    "M",
    "mlp_hidden",
    "num_classes",
    "lr",
    "momentum",
    "grad_clip",
    "batch_size",
    "epochs",
    "lr_decay_epochs",
    "lr_decay_factor",
    "seed",
    "regularizer_kind",
    "block_size",
    "augment",
    "train_per_class",
    "test_per_class",
    "log_drops",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::usage(format!("cannot parse {key}={value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::usage(format!("cannot parse {key}={value:?} as a boolean"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let value = value.trim();
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "input_size" => self.input_size = parse(key, value)?,
            "stage_channels" => {
                let list = parse_list(key, value)?;
                self.stage_channels = list
                    .try_into()
                    .map_err(|_| Error::usage("stage_channels needs exactly 4 values"))?;
            }
            "blocks_per_stage" => self.blocks_per_stage = parse(key, value)?,
            "stage" => self.stage = parse(key, value)?,
            "local_cnns" => self.local_cnns = parse_bool(key, value)?,
            "B" => self.branches = parse(key, value)?,
            "reduction" => self.reduction = parse(key, value)?,
            "p1" => self.p1 = parse(key, value)?,
            "p2" => self.p2 = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "k" => self.heads = parse(key, value)?,
            "M" => self.depth = parse(key, value)?,
            "mlp_hidden" => self.mlp_hidden = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr_decay_epochs" => self.lr_decay_epochs = parse_list(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "regularizer_kind" => self.regularizer_kind = value.trim().parse()?,
            "block_size" => self.block_size = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "train_per_class" => self.train_per_class = parse(key, value)?,
            "test_per_class" => self.test_per_class = parse(key, value)?,
            "log_drops" => self.log_drops = parse_bool(key, value)?,
            _ => return Err(Error::usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "input_size" => self.input_size.to_string(),
            "stage_channels" => join(&self.stage_channels),
            "blocks_per_stage" => self.blocks_per_stage.to_string(),
            "stage" => self.stage.to_string(),
            "local_cnns" => self.local_cnns.to_string(),
            "B" => self.branches.to_string(),
            "reduction" => self.reduction.to_string(),
            "p1" => self.p1.to_string(),
            "p2" => self.p2.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "k" => self.heads.to_string(),
            "M" => self.depth.to_string(),
            "mlp_hidden" => self.mlp_hidden.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "lr" => self.lr.to_string(),
            "momentum" => self.momentum.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "lr_decay_epochs" => join(&self.lr_decay_epochs),
            "lr_decay_factor" => self.lr_decay_factor.to_string(),
            "seed" => self.seed.to_string(),
            "regularizer_kind" => self.regularizer_kind.to_string(),
            "block_size" => self.block_size.to_string(),
            "augment" => self.augment.to_string(),
            "train_per_class" => self.train_per_class.to_string(),
            "test_per_class" => self.test_per_class.to_string(),
            "log_drops" => self.log_drops.to_string(),
            _ => return None,
        })
    }

    /// `(key, value)` pairs for every key, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        KEYS.iter()
            .map(|&k| (k, self.get(k).expect("every key has a value")))
            .collect()
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::usage(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// Spatial side of the feature map handed to the local CNNs.
    pub fn feature_size(&self) -> usize {
        self.input_size >> self.stage
    }

    pub fn feature_channels(&self) -> usize {
        self.stage_channels[self.stage - 1]
    }

    /// Token count including the class token.
    pub fn sequence_len(&self) -> usize {
        let s = self.feature_size();
        s * s + 1
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr / libm::pow(self.lr_decay_factor, passed as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(2..=4).contains(&self.stage) {
            return fail(format!("stage {} not in [2, 4]", self.stage));
        }
        if self.input_size == 0 || self.input_size % (1 << self.stage) != 0 {
            return fail(format!(
                "input_size {} not divisible by 2^{}",
                self.input_size, self.stage
            ));
        }
        if self.stage_channels.contains(&0) || self.blocks_per_stage == 0 {
            return fail("stage channels and blocks_per_stage must be positive".into());
        }
        if self.local_cnns {
            let c = self.feature_channels();
            if self.branches == 0 {
                return fail("B must be at least 1".into());
            }
            if self.reduction == 0 || c % self.reduction != 0 {
                return fail(format!("{c} channels not divisible by reduction {}", self.reduction));
            }
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by k = {}",
                self.embed_dim, self.heads
            ));
        }
        if self.depth == 0 || self.mlp_hidden == 0 {
            return fail("M and mlp_hidden must be positive".into());
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        for (name, p) in [("p1", self.p1), ("p2", self.p2)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.regularizer_kind != RegularizerKind::Mad && self.p1 >= 1.0 {
            return fail(format!("{} needs p1 < 1", self.regularizer_kind));
        }
        if self.regularizer_kind == RegularizerKind::DropBlock
            && (self.block_size % 2 == 0 || self.block_size > self.feature_size())
        {
            return fail(format!(
                "block_size {} must be odd and at most {}",
                self.block_size,
                self.feature_size()
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return fail(format!("grad_clip {} must be finite and non-negative", self.grad_clip));
        }
        if self.lr_decay_factor <= 0.0 {
            return fail("lr_decay_factor must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.p1 = 0.45;
        cfg.lr_decay_epochs = vec![3, 7];
        cfg.regularizer_kind = RegularizerKind::DropBlock;
        let back = TrainConfig::parse_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = TrainConfig::parse_text("p3=0.1").unwrap_err();
        assert!(matches!(err, Error::Usage(m) if m.contains("p3")));
    }

    #[test]
    fn later_lines_override() {
        let cfg = TrainConfig::parse_text("# c\nseed=1\n\nseed = 2\n").unwrap();
        assert_eq!(cfg.seed, 2);
    }

    #[test]
    fn lr_schedule_steps_down() {
        let cfg = TrainConfig {
            lr: 0.1,
            lr_decay_epochs: vec![12, 24],
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 0.1);
        assert_eq!(cfg.lr_at(11), 0.1);
        assert!((cfg.lr_at(12) - 0.01).abs() < 1e-18);
        assert!((cfg.lr_at(29) - 0.001).abs() < 1e-18);
    }

    #[test]
    fn validation_catches_bad_geometry() {
        let mut cfg = TrainConfig {
            input_size: 20,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.input_size = 48;
        cfg.stage = 1;
        assert!(cfg.validate().is_err());
        cfg.stage = 3;
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
        cfg.heads = 8;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn derived_geometry() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.feature_size(), 6);
        assert_eq!(cfg.feature_channels(), 64);
        assert_eq!(cfg.sequence_len(), 37);
    }
}
