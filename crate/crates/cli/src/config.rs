//! Run configuration: flat `key = value` files with `#` comments.
//!
//! Keys are dotted and grouped in the sections `schedule`, `model`,
//! `policy`, `train`, `sample` and `io`. Unknown or repeated keys are
//! rejected. Relative paths resolve against the directory of the config
//! file, or the working directory when no file is given.

use std::path::{Path, PathBuf};

use scalevar::data::ScaleSchedule;
use scalevar::depth::DepthPolicy;
use scalevar::model::ModelConfig;
use scalevar::sampler::SampleConfig;
use scalevar::tensor::AdamConfig;
use scalevar::train::{GradientMode, Ramp, TrainConfig, TrainPhasePlan};
use scalevar::{Error, Result};

pub const SEED_ENV: &str = "SCALEVAR_SEED";

/// Every accepted key with its default, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("schedule.sides", "1,2,3,4,6"),
    ("schedule.vocab", "64"),
    ("model.depth", "6"),
    ("model.width", "64"),
    ("model.heads", "4"),
    ("model.classes", "8"),
    ("model.seed", "$SCALEVAR_SEED or 0"),
    ("policy.d", "3"),
    ("policy.N", "2"),
    ("policy.supported_depths", "policy.d and model.depth"),
    ("train.E1", "2"),
    ("train.E2", "6"),
    ("train.E", "8"),
    ("train.p_initial", "0.2"),
    ("train.fixed_p", "unset"),
    ("train.ramp", "per_step"),
    ("train.batch_size", "16"),
    ("train.lr", "0.001"),
    ("train.weight_decay", "0.05"),
    ("train.probe_size", "16"),
    ("train.gradient_mode", "token_rows"),
    ("train.seed", "$SCALEVAR_SEED or 0"),
    ("sample.top_k", "900"),
    ("sample.top_p", "0.96"),
    ("sample.temperature", "1.0"),
    ("sample.count", "8"),
    ("sample.seed", "$SCALEVAR_SEED or 0"),
    ("io.train_samples", "4096"),
    ("io.val_samples", "512"),
    ("io.data_seed", "$SCALEVAR_SEED or 0"),
    ("io.train_shard", "data/train.svpy"),
    ("io.val_shard", "data/val.svpy"),
    ("io.run_dir", "runs"),
    ("io.checkpoint", "<io.run_dir>/final.svck"),
    ("io.output_dir", "generated"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub sides: Vec<usize>,
    pub vocab: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub classes: usize,
    pub model_seed: u64,
    pub d: usize,
    pub bridge: usize,
    pub supported_depths: Option<Vec<usize>>,
    pub e1: usize,
    pub e2: usize,
    pub e: usize,
    pub p_initial: f64,
    pub fixed_p: Option<f64>,
    pub ramp: Ramp,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub probe_size: usize,
    pub gradient_mode: GradientMode,
    pub train_seed: u64,
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub count: usize,
    pub sample_seed: u64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub data_seed: u64,
    pub train_shard: PathBuf,
    pub val_shard: PathBuf,
    pub run_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
    base: PathBuf,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let items = value
        .split(',')
        .map(|s| parse(key, s.trim()))
        .collect::<Result<Vec<usize>>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("{key} must not be empty")));
    }
    Ok(items)
}

/// Seed from the environment, or 0.
pub fn global_seed() -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

impl RunConfig {
    /// All defaults, seeds taken from [`global_seed`].
    pub fn defaults(base: impl Into<PathBuf>) -> Result<Self> {
        let seed = global_seed()?;
        let base = base.into();
        Ok(Self {
            sides: vec![1, 2, 3, 4, 6],
            vocab: 64,
            depth: 6,
            width: 64,
            heads: 4,
            classes: 8,
            model_seed: seed,
            d: 3,
            bridge: 2,
            supported_depths: None,
            e1: 2,
            e2: 6,
            e: 8,
            p_initial: 0.2,
            fixed_p: None,
            ramp: Ramp::PerStep,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.05,
            probe_size: 16,
            gradient_mode: GradientMode::TokenRows,
            train_seed: seed,
            top_k: 900,
            top_p: 0.96,
            temperature: 1.0,
            count: 8,
            sample_seed: seed,
            train_samples: 4096,
            val_samples: 512,
            data_seed: seed,
            train_shard: base.join("data/train.svpy"),
            val_shard: base.join("data/val.svpy"),
            run_dir: base.join("runs"),
            checkpoint: None,
            output_dir: base.join("generated"),
            base,
        })
    }

    /// Reads `path` (or starts from defaults) and applies `overrides` of
    /// the form `key=value` on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                let mut cfg = Self::defaults(base)?;
                cfg.apply_text(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                cfg
            }
            None => Self::defaults(std::env::current_dir().map_err(|e| Error::io(".", e))?)?,
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: repeated key {k}", n + 1)));
            }
            self.set(k, v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    fn path(&self, value: &str) -> PathBuf {
        self.base.join(value)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "schedule.sides" => self.sides = parse_list(key, v)?,
            "schedule.vocab" => self.vocab = parse(key, v)?,
            "model.depth" => self.depth = parse(key, v)?,
            "model.width" => self.width = parse(key, v)?,
            "model.heads" => self.heads = parse(key, v)?,
            "model.classes" => self.classes = parse(key, v)?,
            "model.seed" => self.model_seed = parse(key, v)?,
            "policy.d" => self.d = parse(key, v)?,
            "policy.N" => self.bridge = parse(key, v)?,
            "policy.supported_depths" => self.supported_depths = Some(parse_list(key, v)?),
            "train.E1" => self.e1 = parse(key, v)?,
            "train.E2" => self.e2 = parse(key, v)?,
            "train.E" => self.e = parse(key, v)?,
            "train.p_initial" => self.p_initial = parse(key, v)?,
            "train.fixed_p" => {
                self.fixed_p = match v {
                    "" | "none" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "train.ramp" => {
                self.ramp = match v {
                    "per_step" => Ramp::PerStep,
                    "per_epoch" => Ramp::PerEpoch,
                    _ => return Err(Error::Config(format!("{key} must be per_step or per_epoch"))),
                }
            }
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.weight_decay" => self.weight_decay = parse(key, v)?,
            "train.probe_size" => self.probe_size = parse(key, v)?,
            "train.gradient_mode" => {
                self.gradient_mode = match v {
                    "token_rows" => GradientMode::TokenRows,
                    "loss_terms" => GradientMode::LossTerms,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key} must be token_rows or loss_terms"
                        )))
                    }
                }
            }
            "train.seed" => self.train_seed = parse(key, v)?,
            "sample.top_k" => self.top_k = parse(key, v)?,
            "sample.top_p" => self.top_p = parse(key, v)?,
            "sample.temperature" => self.temperature = parse(key, v)?,
            "sample.count" => self.count = parse(key, v)?,
            "sample.seed" => self.sample_seed = parse(key, v)?,
            "io.train_samples" => self.train_samples = parse(key, v)?,
            "io.val_samples" => self.val_samples = parse(key, v)?,
            "io.data_seed" => self.data_seed = parse(key, v)?,
            "io.train_shard" => self.train_shard = self.path(v),
            "io.val_shard" => self.val_shard = self.path(v),
            "io.run_dir" => self.run_dir = self.path(v),
            "io.checkpoint" => self.checkpoint = Some(self.path(v)),
            "io.output_dir" => self.output_dir = self.path(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.policy()?;
        self.train_config()?;
        self.sample_config().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if let Some(p) = self.fixed_p {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("train.fixed_p {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<ScaleSchedule> {
        ScaleSchedule::square(&self.sides, self.vocab).map_err(config_error)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::new(self.depth, self.width, self.heads, self.classes, self.schedule()?)
            .map_err(config_error)
    }

    pub fn policy(&self) -> Result<DepthPolicy> {
        DepthPolicy::new(self.depth, self.d, self.bridge, self.sides.len()).map_err(config_error)
    }

    /// Depths `generate` accepts for a model of depth `full`.
    pub fn supported_depths(&self, full: usize) -> Vec<usize> {
        let mut ds = self.supported_depths.clone().unwrap_or_else(|| vec![self.d, full]);
        ds.sort_unstable();
        ds.dedup();
        ds
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let plan = TrainPhasePlan::new(self.e1, self.e2, self.e, self.p_initial)?;
        let mut cfg = TrainConfig::new(plan, self.policy()?);
        cfg.batch_size = self.batch_size;
        cfg.seed = self.train_seed;
        cfg.adam = AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        };
        cfg.ramp = self.ramp;
        cfg.fixed_p = self.fixed_p;
        cfg.probe_size = self.probe_size;
        cfg.gradient_mode = self.gradient_mode;
        cfg.checkpoint_dir = Some(self.run_dir.clone());
        Ok(cfg)
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            top_k: self.top_k,
            top_p: self.top_p,
            temperature: self.temperature,
            seed: self.sample_seed,
        }
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.run_dir.join("metrics.jsonl")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.run_dir.join("final.svck"))
    }
}

/// Invalid settings surface as configuration errors whatever layer
/// detected them.
fn config_error(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> Result<RunConfig> {
        let mut c = RunConfig::defaults("/base")?;
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    #[test]
    fn parses_comments_and_paths() {
        let c = cfg("# toy\npolicy.d = 2  # shallow\n\nio.run_dir = out\nio.checkpoint=/abs/x.svck\n").unwrap();
        assert_eq!(c.d, 2);
        assert_eq!(c.run_dir, PathBuf::from("/base/out"));
        assert_eq!(c.checkpoint_path(), PathBuf::from("/abs/x.svck"));
        assert_eq!(c.supported_depths(6), vec![2, 6]);
    }

    #[test]
    fn rejects_unknown_repeated_and_malformed() {
        assert!(matches!(cfg("policy.depth = 3"), Err(Error::Config(m)) if m.contains("unknown key")));
        assert!(matches!(cfg("policy.d = 3\npolicy.d = 4"), Err(Error::Config(m)) if m.contains("repeated")));
        assert!(matches!(cfg("policy.d"), Err(Error::Config(_))));
        assert!(matches!(cfg("policy.d = x"), Err(Error::Config(_))));
        assert!(matches!(cfg("train.E2 = 1"), Err(Error::Config(_))));
        assert!(matches!(cfg("policy.d = 9"), Err(Error::Config(_))));
        assert!(matches!(cfg("policy.N = 7"), Err(Error::Config(_))));
        assert!(matches!(cfg("sample.top_p = 0"), Err(Error::Config(_))));
    }

    #[test]
    fn every_documented_key_is_accepted() {
        let mut c = RunConfig::defaults("/b").unwrap();
        for (k, _) in KEYS {
            let v = match *k {
                "schedule.sides" | "policy.supported_depths" => "1,2",
                "train.ramp" => "per_epoch",
                "train.gradient_mode" => "loss_terms",
                k if k.starts_with("io.") && !k.ends_with("samples") && !k.ends_with("seed") => "p",
                _ => "1",
            };
            c.set(k, v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }
}
