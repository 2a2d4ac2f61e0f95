//! Run configuration as flat `key = value` text.
//!
//! Lines starting with `#` and blank lines are ignored. Every key has a
//! default; unknown keys are rejected by name.

use std::path::PathBuf;

use crate::ar::{ArConfig, DimSplit, RedundantPrior};
use crate::data::{NoiseSchedule, PatchGeometry, SynthKind};
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::sampler::CfgConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    // data
    pub dataset: SynthKind,
    pub data_dir: Option<PathBuf>,
    pub classes: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub data_seed: u64,
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    // flow
    pub flow_blocks: usize,
    pub flow_width: usize,
    pub flow_layers: usize,
    pub flow_heads: usize,
    // autoregressive model
    pub ar_width: usize,
    pub ar_layers: usize,
    pub ar_heads: usize,
    pub informative_dim: usize,
    pub k_inf: usize,
    pub k_red: usize,
    pub cond_repeat: usize,
    pub redundant_prior: RedundantPrior,
    pub final_permute: bool,
    // optimization
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub noise_start: f64,
    pub noise_end: f64,
    pub cond_dropout: f64,
    pub stop_grad: bool,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub f64: bool,
    // distillation
    pub distill_steps: usize,
    pub distill_lr: f64,
    pub distill_batch: usize,
    pub distill_noise_max: f64,
    // sampling
    pub cfg: CfgConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: SynthKind::Blobs,
            data_dir: None,
            classes: 4,
            train_size: 2048,
            eval_size: 512,
            data_seed: 1,
            image_size: 16,
            channels: 3,
            patch: 4,
            flow_blocks: 4,
            flow_width: 64,
            flow_layers: 1,
            flow_heads: 4,
            ar_width: 128,
            ar_layers: 2,
            ar_heads: 4,
            informative_dim: 8,
            k_inf: 8,
            k_red: 16,
            cond_repeat: 4,
            redundant_prior: RedundantPrior::SharedGmm,
            final_permute: false,
            total_steps: 20_000,
            batch_size: 32,
            lr_max: 1e-4,
            lr_min: 1e-6,
            warmup_steps: 500,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.03,
            grad_clip: 1.0,
            noise_start: 0.1,
            noise_end: 0.005,
            cond_dropout: 0.1,
            stop_grad: false,
            seed: 0,
            log_every: 50,
            checkpoint_every: 1000,
            f64: false,
            distill_steps: 5000,
            distill_lr: 1e-4,
            distill_batch: 32,
            distill_noise_max: 0.3,
            cfg: CfgConfig::default(),
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config {
        key: key.to_string(),
        msg: format!("cannot parse {value:?}"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config {
            key: key.to_string(),
            msg: format!("expected true or false, got {value:?}"),
        }),
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "dataset", "data_dir", "classes", "train_size", "eval_size", "data_seed", "image_size",
    "channels", "patch", "flow_blocks", "flow_width", "flow_layers", "flow_heads", "ar_width",
    "ar_layers", "ar_heads", "informative_dim", "k_inf", "k_red", "cond_repeat",
    "redundant_prior", "final_permute", "total_steps", "batch_size", "lr_max", "lr_min",
    "warmup_steps", "beta1", "beta2", "adam_eps", "weight_decay", "grad_clip", "noise_start",
    "noise_end", "cond_dropout", "stop_grad", "seed", "log_every", "checkpoint_every", "f64",
    "distill_steps", "distill_lr", "distill_batch", "distill_noise_max", "w", "s_c", "s_u",
    "t_pi", "t_sigma", "t_pi_v", "t_sigma_v", "t_s", "redundant_multiplier", "redundant_scale",
];

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset" => {
                self.dataset = v.parse().map_err(|e: Error| Error::Config {
                    key: key.into(),
                    msg: e.to_string(),
                })?
            }
            "data_dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "classes" => self.classes = parse(key, v)?,
            "train_size" => self.train_size = parse(key, v)?,
            "eval_size" => self.eval_size = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "patch" => self.patch = parse(key, v)?,
            "flow_blocks" => self.flow_blocks = parse(key, v)?,
            "flow_width" => self.flow_width = parse(key, v)?,
            "flow_layers" => self.flow_layers = parse(key, v)?,
            "flow_heads" => self.flow_heads = parse(key, v)?,
            "ar_width" => self.ar_width = parse(key, v)?,
            "ar_layers" => self.ar_layers = parse(key, v)?,
            "ar_heads" => self.ar_heads = parse(key, v)?,
            "informative_dim" => self.informative_dim = parse(key, v)?,
            "k_inf" => self.k_inf = parse(key, v)?,
            "k_red" => self.k_red = parse(key, v)?,
            "cond_repeat" => self.cond_repeat = parse(key, v)?,
            "redundant_prior" => {
                self.redundant_prior = v.parse().map_err(|e: Error| Error::Config {
                    key: key.into(),
                    msg: e.to_string(),
                })?
            }
            "final_permute" => self.final_permute = parse_bool(key, v)?,
            "total_steps" => self.total_steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr_max" => self.lr_max = parse(key, v)?,
            "lr_min" => self.lr_min = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "noise_start" => self.noise_start = parse(key, v)?,
            "noise_end" => self.noise_end = parse(key, v)?,
            "cond_dropout" => self.cond_dropout = parse(key, v)?,
            "stop_grad" => self.stop_grad = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "f64" => self.f64 = parse_bool(key, v)?,
            "distill_steps" => self.distill_steps = parse(key, v)?,
            "distill_lr" => self.distill_lr = parse(key, v)?,
            "distill_batch" => self.distill_batch = parse(key, v)?,
            "distill_noise_max" => self.distill_noise_max = parse(key, v)?,
            "w" => self.cfg.w = parse(key, v)?,
            "s_c" => self.cfg.s_c = parse(key, v)?,
            "s_u" => self.cfg.s_u = parse(key, v)?,
            "t_pi" => self.cfg.t_pi = parse(key, v)?,
            "t_sigma" => self.cfg.t_sigma = parse(key, v)?,
            "t_pi_v" => self.cfg.t_pi_v = parse(key, v)?,
            "t_sigma_v" => self.cfg.t_sigma_v = parse(key, v)?,
            "t_s" => self.cfg.t_s = parse(key, v)?,
            "redundant_multiplier" => self.cfg.redundant_multiplier = parse(key, v)?,
            "redundant_scale" => self.cfg.redundant_scale = parse(key, v)?,
            _ => {
                return Err(Error::Config {
                    key: key.to_string(),
                    msg: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "dataset" => self.dataset.to_string(),
            "data_dir" => self
                .data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "classes" => self.classes.to_string(),
            "train_size" => self.train_size.to_string(),
            "eval_size" => self.eval_size.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "image_size" => self.image_size.to_string(),
            "channels" => self.channels.to_string(),
            "patch" => self.patch.to_string(),
            "flow_blocks" => self.flow_blocks.to_string(),
            "flow_width" => self.flow_width.to_string(),
            "flow_layers" => self.flow_layers.to_string(),
            "flow_heads" => self.flow_heads.to_string(),
            "ar_width" => self.ar_width.to_string(),
            "ar_layers" => self.ar_layers.to_string(),
            "ar_heads" => self.ar_heads.to_string(),
            "informative_dim" => self.informative_dim.to_string(),
            "k_inf" => self.k_inf.to_string(),
            "k_red" => self.k_red.to_string(),
            "cond_repeat" => self.cond_repeat.to_string(),
            "redundant_prior" => self.redundant_prior.to_string(),
            "final_permute" => self.final_permute.to_string(),
            "total_steps" => self.total_steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr_max" => format!("{:?}", self.lr_max),
            "lr_min" => format!("{:?}", self.lr_min),
            "warmup_steps" => self.warmup_steps.to_string(),
            "beta1" => format!("{:?}", self.beta1),
            "beta2" => format!("{:?}", self.beta2),
            "adam_eps" => format!("{:?}", self.adam_eps),
            "weight_decay" => format!("{:?}", self.weight_decay),
            "grad_clip" => format!("{:?}", self.grad_clip),
            "noise_start" => format!("{:?}", self.noise_start),
            "noise_end" => format!("{:?}", self.noise_end),
            "cond_dropout" => format!("{:?}", self.cond_dropout),
            "stop_grad" => self.stop_grad.to_string(),
            "seed" => self.seed.to_string(),
            "log_every" => self.log_every.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "f64" => self.f64.to_string(),
            "distill_steps" => self.distill_steps.to_string(),
            "distill_lr" => format!("{:?}", self.distill_lr),
            "distill_batch" => self.distill_batch.to_string(),
            "distill_noise_max" => format!("{:?}", self.distill_noise_max),
            "w" => format!("{:?}", self.cfg.w),
            "s_c" => self.cfg.s_c.to_string(),
            "s_u" => self.cfg.s_u.to_string(),
            "t_pi" => format!("{:?}", self.cfg.t_pi),
            "t_sigma" => format!("{:?}", self.cfg.t_sigma),
            "t_pi_v" => format!("{:?}", self.cfg.t_pi_v),
            "t_sigma_v" => format!("{:?}", self.cfg.t_sigma_v),
            "t_s" => format!("{:?}", self.cfg.t_s),
            "redundant_multiplier" => self.cfg.redundant_multiplier.to_string(),
            "redundant_scale" => format!("{:?}", self.cfg.redundant_scale),
            _ => unreachable!("key table and getter disagree on {key}"),
        }
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                msg: "expected key = value".into(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical echo: every key in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }

    pub fn geometry(&self) -> Result<PatchGeometry> {
        PatchGeometry::new(self.image_size, self.image_size, self.channels, self.patch)
    }

    pub fn noise_schedule(&self) -> NoiseSchedule {
        NoiseSchedule {
            sigma_start: self.noise_start,
            sigma_end: self.noise_end,
            total_steps: self.total_steps,
        }
    }

    pub fn flow_config(&self) -> Result<FlowConfig> {
        let g = self.geometry()?;
        Ok(FlowConfig {
            tokens: g.tokens(),
            token_dim: g.token_dim(),
            blocks: self.flow_blocks,
            width: self.flow_width,
            layers: self.flow_layers,
            heads: self.flow_heads,
        })
    }

    pub fn ar_config(&self) -> Result<ArConfig> {
        let g = self.geometry()?;
        Ok(ArConfig {
            tokens: g.tokens(),
            split: DimSplit::new(g.token_dim(), self.informative_dim)?,
            classes: self.classes,
            width: self.ar_width,
            layers: self.ar_layers,
            heads: self.ar_heads,
            informative_components: self.k_inf,
            redundant_components: self.k_red,
            cond_repeat: self.cond_repeat,
            redundant_prior: self.redundant_prior,
            final_permute: self.final_permute,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Error::Config { key: key.into(), msg };
        self.geometry().map_err(|e| bad("patch", e.to_string()))?;
        self.flow_config()?.validate().map_err(|e| bad("flow_width", e.to_string()))?;
        self.ar_config()
            .and_then(|c| c.validate())
            .map_err(|e| bad("informative_dim", e.to_string()))?;
        if self.total_steps == 0 {
            return Err(bad("total_steps", "must be positive".into()));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(bad("warmup_steps", "must be smaller than total_steps".into()));
        }
        for (k, v) in [("batch_size", self.batch_size), ("log_every", self.log_every), ("train_size", self.train_size), ("eval_size", self.eval_size), ("distill_batch", self.distill_batch)] {
            if v == 0 {
                return Err(bad(k, "must be positive".into()));
            }
        }
        for (k, v) in [("lr_max", self.lr_max), ("lr_min", self.lr_min), ("adam_eps", self.adam_eps), ("grad_clip", self.grad_clip), ("distill_lr", self.distill_lr)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(bad(k, format!("must be a positive number, got {v}")));
            }
        }
        if self.lr_min > self.lr_max {
            return Err(bad("lr_min", "exceeds lr_max".into()));
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(bad(k, format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(bad("weight_decay", "must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(bad("cond_dropout", "must lie in [0, 1]".into()));
        }
        if !(self.noise_start >= self.noise_end && self.noise_end >= 0.0) {
            return Err(bad("noise_end", "need noise_start >= noise_end >= 0".into()));
        }
        if !(self.distill_noise_max >= 0.0) {
            return Err(bad("distill_noise_max", "must be >= 0".into()));
        }
        self.cfg.validate().map_err(|e| bad("w", e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_echo_round_trips() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_text();
        assert_eq!(text.lines().count(), KEYS.len());
        assert_eq!(TrainConfig::from_text(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = TrainConfig::from_text("# smoke\n\ntotal_steps = 200\nwarmup_steps=10\nlr_max = 3e-4\nredundant_prior = standard_normal\n").unwrap();
        assert_eq!(cfg.total_steps, 200);
        assert_eq!(cfg.lr_max, 3e-4);
        assert_eq!(cfg.redundant_prior, RedundantPrior::StandardNormal);
    }

    #[test]
    fn unknown_key_is_named() {
        match TrainConfig::from_text("lr_maxx = 1") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "lr_maxx"),
            other => panic!("{other:?}"),
        }
        match TrainConfig::from_text("batch_size = many") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "batch_size"),
            other => panic!("{other:?}"),
        }
        match TrainConfig::from_text("warmup_steps = 20000") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "warmup_steps"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn derived_model_shapes() {
        let cfg = TrainConfig::default();
        let f = cfg.flow_config().unwrap();
        assert_eq!((f.tokens, f.token_dim), (16, 48));
        let a = cfg.ar_config().unwrap();
        assert_eq!((a.split.informative, a.split.redundant), (8, 40));
    }
}
