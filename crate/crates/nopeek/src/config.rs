//! Flat key-value config file shared by the CLI endpoints.
//!
//! ```text
//! # training
//! alpha1 = 0.5
//! alpha2 = 1.0
//! epochs = 12
//! batch_size = 64
//! split_index = 5
//! burnin_iters = 100
//! burnin_mode = off
//! noise_scale = 0
//! seed = 42
//! ```
//!
//! `protect_attr` optionally names a dataset attribute to decorrelate
//! against instead of the raw input; that attribute is excluded from the
//! trained heads.

use std::path::Path;

use crate::burnin::BurninMode;
use crate::error::{Error, Result};
use crate::loss::NoPeekWeights;
use crate::splitnet::SessionConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct FileConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub split_index: usize,
    pub burnin_iters: usize,
    pub burnin_mode: BurninMode,
    pub noise_scale: f64,
    pub seed: u64,
    pub protect_attr: Option<String>,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            alpha1: 0.5,
            alpha2: 1.0,
            epochs: 30,
            batch_size: 64,
            split_index: crate::model::DEFAULT_SPLIT_INDEX,
            burnin_iters: 100,
            burnin_mode: BurninMode::Off,
            noise_scale: 0.0,
            seed: 1,
            protect_attr: None,
        }
    }
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<FileConfig> {
        let mut cfg = FileConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = match line.split_once('=') {
                Some((k, v)) => (k.trim(), v.trim()),
                None => {
                    return Err(Error::Config(format!(
                        "line {}: expected `key = value`, got {:?}",
                        lineno + 1,
                        raw
                    )))
                }
            };
            let parse_f64 = |v: &str| -> Result<f64> {
                v.parse()
                    .map_err(|_| Error::Config(format!("line {}: bad number {:?}", lineno + 1, v)))
            };
            let parse_usize = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|_| Error::Config(format!("line {}: bad integer {:?}", lineno + 1, v)))
            };
            match key {
                "alpha1" => cfg.alpha1 = parse_f64(value)?,
                "alpha2" => cfg.alpha2 = parse_f64(value)?,
                "epochs" => cfg.epochs = parse_usize(value)?,
                "batch_size" => cfg.batch_size = parse_usize(value)?,
                "split_index" => cfg.split_index = parse_usize(value)?,
                "burnin_iters" => cfg.burnin_iters = parse_usize(value)?,
                "burnin_mode" => cfg.burnin_mode = BurninMode::parse(value)?,
                "noise_scale" => cfg.noise_scale = parse_f64(value)?,
                "seed" => {
                    cfg.seed = value.parse().map_err(|_| {
                        Error::Config(format!("line {}: bad seed {:?}", lineno + 1, value))
                    })?
                }
                "protect_attr" => cfg.protect_attr = Some(value.to_string()),
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key {:?}",
                        lineno + 1,
                        other
                    )))
                }
            }
        }
        cfg.to_session()?.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {:?}: {}", path, e)))?;
        FileConfig::parse(&text)
    }

    pub fn to_session(&self) -> Result<SessionConfig> {
        let weights = NoPeekWeights { alpha1: self.alpha1, alpha2: self.alpha2 };
        Ok(SessionConfig {
            weights,
            epochs: self.epochs,
            batch_size: self.batch_size,
            split_index: self.split_index,
            seed: self.seed,
            noise_scale: self.noise_scale,
            burnin_mode: self.burnin_mode,
            burnin_iters: self.burnin_iters,
            ..Default::default()
        })
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::json!({
            "alpha1": self.alpha1,
            "alpha2": self.alpha2,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "split_index": self.split_index,
            "burnin_iters": self.burnin_iters,
            "burnin_mode": self.burnin_mode.name(),
            "noise_scale": self.noise_scale,
            "seed": self.seed,
            "protect_attr": self.protect_attr,
        })
    }
}
