use std::path::{Path, PathBuf};

use crate::bench::SpecScope;
use crate::error::{Error, Result};
use crate::repair::{Isolation, Method, RepairConfig, Variant};

/// Every knob of a run. Built from defaults, then a key=value file, then
/// command-line flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub corpus_size: usize,
    pub train_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Upper bound on the sequence pairs used for the patching experiment.
    pub max_pairs: usize,
    /// Only probe the first n benchmark failures.
    pub probe_limit: Option<usize>,
    pub method: Method,
    pub variant: Variant,
    pub quota: usize,
    pub candidates: usize,
    pub parallel_k: usize,
    pub isolation: Isolation,
    pub spec_scope: SpecScope,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            corpus_size: 12_000,
            train_steps: 500,
            learning_rate: 3e-3,
            batch_size: 16,
            max_pairs: 240,
            probe_limit: None,
            method: Method::Mint,
            variant: Variant::None,
            quota: 5,
            candidates: 10,
            parallel_k: 10,
            isolation: Isolation::Fresh,
            spec_scope: SpecScope::SameType,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "corpus_size" => self.corpus_size = parse(key, value)?,
            "train_steps" => self.train_steps = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_pairs" => self.max_pairs = parse(key, value)?,
            "probe_limit" => self.probe_limit = Some(parse(key, value)?),
            "method" => self.method = value.parse()?,
            "variant" => self.variant = value.parse()?,
            "quota" => self.quota = parse(key, value)?,
            "candidates" => self.candidates = parse(key, value)?,
            "parallel_k" => self.parallel_k = parse(key, value)?,
            "isolation" => self.isolation = value.parse()?,
            "spec_scope" => self.spec_scope = value.parse()?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn repair_config(&self) -> Result<RepairConfig> {
        let cfg = RepairConfig {
            method: self.method,
            variant: self.variant,
            quota: self.quota,
            candidates: self.candidates,
            parallel_k: self.parallel_k,
            seed: self.seed,
            ..RepairConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus_size == 0 || self.batch_size == 0 {
            return Err(Error::Config("corpus_size and batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        self.repair_config().map(|_| ())
    }
}
