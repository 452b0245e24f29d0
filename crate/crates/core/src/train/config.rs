//! `key = value` training configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::heatmap::{DEFAULT_KERNEL_SIGMA, DEFAULT_STRIDE};
use crate::nn::{InjectPoint, NetConfig};

use super::TrainError;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "UNIFL_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Decay points as fractions of `iterations`.
    pub milestones: Vec<f64>,
    pub beta: f64,
    pub seed: u64,
    pub per_dataset: usize,
    pub augment: bool,
    pub weight_decay: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub kernel_sigma: f64,
    pub stride: usize,
    pub net: NetConfig,
    /// Directory with one subdirectory per dataset (`AFLW`, `WFLW`, `COFW`, `300W`).
    pub data_root: Option<PathBuf>,
    /// Synthetic faces per dataset when no data root is given.
    pub synth_per_dataset: usize,
    pub protocol: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 500,
            lr: 2.5e-4,
            lr_decay: 0.8,
            milestones: vec![0.4, 0.7, 0.9],
            beta: 0.9,
            seed: 0,
            per_dataset: 2,
            augment: true,
            weight_decay: 0.0,
            grad_clip: 0.0,
            kernel_sigma: DEFAULT_KERNEL_SIGMA,
            stride: DEFAULT_STRIDE,
            net: NetConfig::default(),
            data_root: None,
            synth_per_dataset: 16,
            protocol: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, TrainError> {
    v.parse().map_err(|_| TrainError::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse4(key: &str, v: &str) -> Result<[usize; 4], TrainError> {
    let parts: Vec<usize> = v.split(',').map(|p| parse(key, p.trim())).collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| TrainError::Config(format!("{key}: expected four comma-separated values")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, TrainError> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(TrainError::Config(format!("{key}: expected a boolean, got `{v}`"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Set one key. Keys mirror [`TrainConfig::to_text`].
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), TrainError> {
        match key {
            "iterations" => self.iterations = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "milestones" => {
                self.milestones =
                    if v.is_empty() { Vec::new() } else { v.split(',').map(|p| parse(key, p.trim())).collect::<Result<_, _>>()? }
            }
            "beta" => self.beta = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "per_dataset" => self.per_dataset = parse(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "kernel_sigma" => self.kernel_sigma = parse(key, v)?,
            "stride" => self.stride = parse(key, v)?,
            "image_size" => self.net.image_size = parse(key, v)?,
            "in_channels" => self.net.in_channels = parse(key, v)?,
            "widths" => self.net.widths = parse4(key, v)?,
            "depths" => self.net.depths = parse4(key, v)?,
            "heads" => self.net.heads = parse4(key, v)?,
            "sr_ratios" => self.net.sr_ratios = parse4(key, v)?,
            "mlp_ratio" => self.net.mlp_ratio = parse(key, v)?,
            "prompt_width" => self.net.set_prompt_width(parse(key, v)?),
            "inject" => self.net.inject = v.parse::<InjectPoint>().map_err(TrainError::Config)?,
            "decoder_width" => self.net.decoder_width = parse(key, v)?,
            "sigma" => self.net.hf_sigma = parse(key, v)?,
            "data_root" => self.data_root = (!v.is_empty()).then(|| PathBuf::from(v)),
            "synth_per_dataset" => self.synth_per_dataset = parse(key, v)?,
            "protocol" => self.protocol = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(TrainError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Defaults overridden by `text`. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cfg = TrainConfig::default();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected `key = value`", k + 1)))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| TrainError::Config(format!("line {}: {e}", k + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply a seed override as read from [`SEED_ENV`].
    pub fn override_seed(&mut self, value: Option<&str>) -> Result<(), TrainError> {
        if let Some(v) = value {
            self.seed = parse(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<(), TrainError> {
        self.override_seed(std::env::var(SEED_ENV).ok().as_deref())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return bad("learning rate and decay must be positive");
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("milestones are fractions of the iteration count");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1]");
        }
        if self.per_dataset == 0 || self.stride == 0 || !(self.kernel_sigma > 0.0) {
            return bad("per_dataset, stride and kernel_sigma must be positive");
        }
        if self.net.image_size / crate::nn::model::STEM_STRIDE * self.stride != self.net.image_size {
            return bad("stride must equal the network output stride");
        }
        if self.data_root.is_none() && self.synth_per_dataset == 0 {
            return bad("no data: set data_root or synth_per_dataset");
        }
        self.net.validate().map_err(|e| TrainError::Config(e.to_string()))
    }

    /// Milestone iterations; the schedule decays at the start of each.
    pub fn milestone_iterations(&self) -> Vec<usize> {
        self.milestones.iter().map(|f| (f * self.iterations as f64).round() as usize).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let n = &self.net;
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        kv("iterations", self.iterations.to_string());
        kv("lr", self.lr.to_string());
        kv("lr_decay", self.lr_decay.to_string());
        kv("milestones", join(&self.milestones));
        kv("beta", self.beta.to_string());
        kv("seed", self.seed.to_string());
        kv("per_dataset", self.per_dataset.to_string());
        kv("augment", self.augment.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("kernel_sigma", self.kernel_sigma.to_string());
        kv("stride", self.stride.to_string());
        kv("image_size", n.image_size.to_string());
        kv("in_channels", n.in_channels.to_string());
        kv("widths", join(&n.widths));
        kv("depths", join(&n.depths));
        kv("heads", join(&n.heads));
        kv("sr_ratios", join(&n.sr_ratios));
        kv("mlp_ratio", n.mlp_ratio.to_string());
        kv("prompt_width", n.prompt_width().to_string());
        kv("inject", n.inject.to_string());
        kv("decoder_width", n.decoder_width.to_string());
        kv("sigma", n.hf_sigma.to_string());
        kv("data_root", self.data_root.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        kv("synth_per_dataset", self.synth_per_dataset.to_string());
        kv("protocol", self.protocol.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        s
    }
}
