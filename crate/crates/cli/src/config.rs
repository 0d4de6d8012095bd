use std::path::{Path, PathBuf};

use dicot::encoder::EncoderConfig;
use dicot::eval::ProbeConfig;
use dicot::objective::{LossConfig, PositiveMode};
use dicot::partition::{PartitionParams, SplitMode};
use dicot::trainer::{OptimizerConfig, PretrainConfig};
use dicot::{Error, Result};

/// Every accepted key with its default and meaning, in documentation order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("encoder.channels", "32,64,128", "output channels of each conv layer"),
    ("encoder.kernel_sizes", "8,5,3", "kernel width of each conv layer"),
    ("encoder.embed_dim", "64", "embedding width F"),
    ("encoder.projection", "none", "hidden width of the projection head, or none"),
    ("partition.rho", "0.5", "overlap ratio between consecutive sub-blocks, in [0, 1)"),
    ("partition.k_min", "2", "smallest sub-block count drawn per iteration"),
    ("partition.k_max", "10", "largest sub-block count drawn per iteration"),
    ("partition.k_fixed", "none", "fixed sub-block count; overrides k_min/k_max"),
    ("loss.tau", "0.07", "temperature dividing the similarity logits"),
    ("loss.positive", "preceding", "positive selection: preceding|next|bidirectional|shuffled"),
    ("optim.lr", "0.0003", "peak learning rate"),
    ("optim.weight_decay", "0.0003", "decoupled weight decay"),
    ("optim.beta1", "0.9", "first-moment decay"),
    ("optim.beta2", "0.99", "second-moment decay"),
    ("optim.eps", "1e-8", "denominator guard"),
    ("optim.warmup_frac", "0.1", "fraction of iterations with linear warmup"),
    ("optim.iters", "1500", "pretraining iterations"),
    ("optim.batch_size", "128", "windows per iteration (drawn with replacement)"),
    ("optim.seed", "1", "seed for initialization, batches and k draws"),
    ("eval.seeds", "1,2,3,4,5", "seeds for the sampled evaluation protocols"),
    ("eval.probe_lambda", "0.0001", "L2 penalty of the linear probe"),
    ("eval.probe_lr", "0.01", "learning rate of the linear probe"),
    ("eval.probe_iters", "500", "full-batch steps of the linear probe"),
    ("eval.kmeans_max_iter", "100", "Lloyd iterations per k-means run"),
    ("paths.data", "none", "training data when --data is not given"),
    ("paths.out", "none", "model output when --out is not given"),
    ("paths.log", "none", "training log CSV when --log is not given"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub partition: PartitionParams,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub probe: ProbeConfig,
    pub kmeans_max_iter: usize,
    pub seeds: Vec<u64>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
    k_range: (usize, usize),
    k_fixed: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            encoder: EncoderConfig::default(),
            partition: PartitionParams::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            probe: ProbeConfig::default(),
            kmeans_max_iter: 100,
            seeds: Vec::new(),
            data: None,
            out: None,
            log: None,
            k_range: (2, 10),
            k_fixed: None,
        };
        for (key, value, _) in KEYS {
            cfg.set(key, value).expect("documented defaults parse");
        }
        cfg
    }
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key} = {value:?}: {what}"))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, "not a valid number"))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.eq_ignore_ascii_case("none")).then(|| PathBuf::from(value))
}

/// Parses a comma-separated seed list such as `1,2,3`.
pub fn parse_seeds(value: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = parse_list("seeds", value)?;
    if seeds.is_empty() {
        return Err(Error::Config("empty seed list".into()));
    }
    Ok(seeds)
}

impl RunConfig {
    /// Reads a `key = value` file (one assignment per line, `#` comments)
    /// and then applies `overrides` of the same form.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            cfg.apply_text(&text)?;
        }
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {item:?}")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, detail(&e))))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "encoder.channels" => self.encoder.channels = parse_list(key, value)?,
            "encoder.kernel_sizes" => self.encoder.kernel_sizes = parse_list(key, value)?,
            "encoder.embed_dim" => self.encoder.embed_dim = parse(key, value)?,
            "encoder.projection" => self.encoder.projection = optional(key, value)?,
            "partition.rho" => self.partition.rho = parse(key, value)?,
            "partition.k_min" => self.k_range.0 = parse(key, value)?,
            "partition.k_max" => self.k_range.1 = parse(key, value)?,
            "partition.k_fixed" => self.k_fixed = optional(key, value)?,
            "loss.tau" => self.loss.tau = parse(key, value)?,
            "loss.positive" => self.loss.positive_mode = value.parse::<PositiveMode>()?,
            "optim.lr" => self.optimizer.base_lr = parse(key, value)?,
            "optim.weight_decay" => self.optimizer.weight_decay = parse(key, value)?,
            "optim.beta1" => self.optimizer.beta1 = parse(key, value)?,
            "optim.beta2" => self.optimizer.beta2 = parse(key, value)?,
            "optim.eps" => self.optimizer.eps = parse(key, value)?,
            "optim.warmup_frac" => self.optimizer.warmup_frac = parse(key, value)?,
            "optim.iters" => self.optimizer.total_iters = parse(key, value)?,
            "optim.batch_size" => self.optimizer.batch_size = parse(key, value)?,
            "optim.seed" => self.optimizer.seed = parse(key, value)?,
            "eval.seeds" => self.seeds = parse_seeds(value)?,
            "eval.probe_lambda" => self.probe.lambda = parse(key, value)?,
            "eval.probe_lr" => self.probe.lr = parse(key, value)?,
            "eval.probe_iters" => self.probe.iters = parse(key, value)?,
            "eval.kmeans_max_iter" => self.kmeans_max_iter = parse(key, value)?,
            "paths.data" => self.data = optional_path(value),
            "paths.out" => self.out = optional_path(value),
            "paths.log" => self.log = optional_path(value),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        self.partition.split = match self.k_fixed {
            Some(k) => SplitMode::Fixed(k),
            None => SplitMode::Uniform {
                min: self.k_range.0,
                max: self.k_range.1,
            },
        };
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.partition.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if !(self.probe.lr > 0.0 && self.probe.lambda >= 0.0) {
            return Err(Error::Config("probe lr must be > 0 and lambda >= 0".into()));
        }
        Ok(())
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            encoder: self.encoder.clone(),
            partition: self.partition,
            loss: self.loss,
            optimizer: self.optimizer,
        }
    }
}

/// Error message without the variant prefix, for nesting in another error.
pub fn detail(e: &Error) -> String {
    match e {
        Error::Config(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Text printed by `--help config`.
pub fn help_text() -> String {
    let mut out = String::from(
        "Config files hold one `key = value` per line; `#` starts a comment.\n\
         Unknown keys are rejected. `--set key=value` overrides the file.\n\nKeys:\n",
    );
    let width = KEYS.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
    for (key, default, what) in KEYS {
        out.push_str(&format!("  {key:width$}  {what} [default: {default}]\n"));
    }
    out
}
