//! Training configuration as flat `key=value` text.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::degradation::DegradationConfig;
use crate::error::{Error, Result};
use crate::geometry::{AdaStnConfig, AlignMode};
use crate::matching::MatchConfig;
use crate::restoration::RestorationConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub ratio: usize,
    /// LR side of a training triplet; `0` accepts whatever the dataset holds.
    pub lr_patch: usize,
    pub batch: usize,
    pub epochs: usize,
    /// Optimizer steps; `0` derives the count from `epochs`.
    pub iterations: usize,
    pub lr: f32,
    /// Learning rate after the midpoint.
    pub lr_final: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub zero_prob: f32,
    pub lambda_c: f64,
    pub lambda_sw: f64,
    pub seed: u64,
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
    pub channels: usize,
    pub blocks: usize,
    pub feature_channels: usize,
    pub estimator_channels: usize,
    pub stn_stages: usize,
    pub align_mode: AlignMode,
    pub lr_skip: bool,
    pub deg_channels: usize,
    /// `0` uses one projection per feature channel.
    pub sw_projections: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ratio: 2,
            lr_patch: 32,
            batch: 4,
            epochs: 50,
            iterations: 0,
            lr: 5e-4,
            lr_final: 2.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            zero_prob: 0.3,
            lambda_c: 100.0,
            lambda_sw: 0.08,
            seed: 0,
            hflip: true,
            vflip: true,
            rot90: true,
            channels: 16,
            blocks: 4,
            feature_channels: 16,
            estimator_channels: 16,
            stn_stages: 3,
            align_mode: AlignMode::AdaStn,
            lr_skip: true,
            deg_channels: 16,
            sw_projections: 0,
            log_every: 50,
        }
    }
}

const KEYS: &[&str] = &[
    "ratio",
    "lr_patch",
    "batch",
    "epochs",
    "iterations",
    "lr",
    "lr_final",
    "beta1",
    "beta2",
    "zero_prob",
    "lambda_c",
    "lambda_sw",
    "seed",
    "hflip",
    "vflip",
    "rot90",
    "channels",
    "blocks",
    "feature_channels",
    "estimator_channels",
    "stn_stages",
    "align_mode",
    "lr_skip",
    "deg_channels",
    "sw_projections",
    "log_every",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

impl TrainConfig {
    /// Published training setup at ratio 4.
    pub fn published() -> Self {
        let r = RestorationConfig::published();
        Self {
            ratio: 4,
            lr_patch: 48,
            batch: 16,
            epochs: 400,
            lr: 1e-4,
            lr_final: 5e-5,
            channels: r.channels,
            blocks: r.blocks,
            feature_channels: 32,
            estimator_channels: 64,
            lr_skip: false,
            deg_channels: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !matches!(self.ratio, 2 | 4) {
            return bad(format!("ratio must be 2 or 4, got {}", self.ratio));
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if self.iterations == 0 && self.epochs == 0 {
            return bad("either epochs or iterations must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.zero_prob) {
            return bad(format!("zero_prob must lie in [0, 1], got {}", self.zero_prob));
        }
        if self.lambda_c < 0.0 || self.lambda_sw < 0.0 {
            return bad("loss weights must be nonnegative".into());
        }
        if self.channels == 0
            || self.blocks == 0
            || self.feature_channels == 0
            || self.estimator_channels == 0
            || self.stn_stages == 0
            || self.deg_channels == 0
        {
            return bad("network widths and depths must be positive".into());
        }
        if self.lr_patch != 0 && self.lr_patch % (self.ratio * self.ratio) != 0 {
            return bad(format!("lr_patch must be divisible by {}", self.ratio * self.ratio));
        }
        Ok(())
    }

    /// Optimizer steps for a dataset of `n` samples.
    pub fn total_steps(&self, n: usize) -> usize {
        if self.iterations > 0 {
            self.iterations
        } else {
            self.epochs * n.div_ceil(self.batch)
        }
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f32 {
        if step < total / 2 {
            self.lr
        } else {
            self.lr_final
        }
    }

    pub fn degradation(&self) -> DegradationConfig {
        DegradationConfig {
            ratio: self.ratio,
            channels: self.deg_channels,
            guide_channels: self.deg_channels,
            kernel: 3,
        }
    }

    pub fn adastn(&self) -> AdaStnConfig {
        AdaStnConfig {
            num_stages: self.stn_stages,
            zero_prob: self.zero_prob,
            estimator_channels: self.estimator_channels,
            mode: self.align_mode,
        }
    }

    pub fn matching(&self) -> MatchConfig {
        MatchConfig {
            feature_channels: self.feature_channels,
            ..MatchConfig::default()
        }
    }

    pub fn restoration(&self) -> RestorationConfig {
        RestorationConfig {
            ratio: self.ratio,
            channels: self.channels,
            blocks: self.blocks,
            lr_skip: self.lr_skip,
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let flag = |v: &str| -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("bad boolean {v:?} for {key}"))),
            }
        };
        match key {
            "ratio" => self.ratio = parse(key, v)?,
            "lr_patch" => self.lr_patch = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_final" => self.lr_final = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "zero_prob" => self.zero_prob = parse(key, v)?,
            "lambda_c" => self.lambda_c = parse(key, v)?,
            "lambda_sw" => self.lambda_sw = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "hflip" => self.hflip = flag(v)?,
            "vflip" => self.vflip = flag(v)?,
            "rot90" => self.rot90 = flag(v)?,
            "channels" => self.channels = parse(key, v)?,
            "blocks" => self.blocks = parse(key, v)?,
            "feature_channels" => self.feature_channels = parse(key, v)?,
            "estimator_channels" => self.estimator_channels = parse(key, v)?,
            "stn_stages" => self.stn_stages = parse(key, v)?,
            "align_mode" => self.align_mode = v.parse()?,
            "lr_skip" => self.lr_skip = flag(v)?,
            "deg_channels" => self.deg_channels = parse(key, v)?,
            "sw_projections" => self.sw_projections = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parse `key=value` lines over the desk defaults. `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let v = match *key {
                "ratio" => self.ratio.to_string(),
                "lr_patch" => self.lr_patch.to_string(),
                "batch" => self.batch.to_string(),
                "epochs" => self.epochs.to_string(),
                "iterations" => self.iterations.to_string(),
                "lr" => self.lr.to_string(),
                "lr_final" => self.lr_final.to_string(),
                "beta1" => self.beta1.to_string(),
                "beta2" => self.beta2.to_string(),
                "zero_prob" => self.zero_prob.to_string(),
                "lambda_c" => self.lambda_c.to_string(),
                "lambda_sw" => self.lambda_sw.to_string(),
                "seed" => self.seed.to_string(),
                "hflip" => self.hflip.to_string(),
                "vflip" => self.vflip.to_string(),
                "rot90" => self.rot90.to_string(),
                "channels" => self.channels.to_string(),
                "blocks" => self.blocks.to_string(),
                "feature_channels" => self.feature_channels.to_string(),
                "estimator_channels" => self.estimator_channels.to_string(),
                "stn_stages" => self.stn_stages.to_string(),
                "align_mode" => self.align_mode.as_str().to_string(),
                "lr_skip" => self.lr_skip.to_string(),
                "deg_channels" => self.deg_channels.to_string(),
                "sw_projections" => self.sw_projections.to_string(),
                "log_every" => self.log_every.to_string(),
                _ => unreachable!(),
            };
            let _ = writeln!(s, "{key}={v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_covers_every_field() {
        let mut cfg = TrainConfig::published();
        cfg.seed = 77;
        cfg.align_mode = AlignMode::DeformDirect;
        cfg.hflip = false;
        let text = cfg.to_text();
        assert_eq!(text.lines().count(), KEYS.len());
        assert_eq!(TrainConfig::parse_text(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fall_back_to_defaults() {
        let cfg = TrainConfig::parse_text("# desk\nbatch = 2\n\nseed=5 # trailing\n").unwrap();
        assert_eq!(cfg.batch, 2);
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.lambda_sw, 0.08);
    }

    #[test]
    fn bad_inputs_are_config_errors() {
        for text in ["nope=1", "batch", "zero_prob=1.5", "ratio=3", "hflip=maybe", "align_mode=warp"] {
            assert!(matches!(TrainConfig::parse_text(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn schedule_halves_at_midpoint() {
        let cfg = TrainConfig::published();
        assert_eq!(cfg.lr_at(0, 10), 1e-4);
        assert_eq!(cfg.lr_at(4, 10), 1e-4);
        assert_eq!(cfg.lr_at(5, 10), 5e-5);
        assert_eq!(cfg.total_steps(33), 400 * 3);
    }
}
