//! `key = value` run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use textmanip_core::config::{ModelConfig, TrainConfig};

/// Everything a subcommand may need. Precedence: defaults, then the config
/// file, then command-line overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            dataset_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs"),
            train_size: 512,
            val_size: 64,
            test_size: 64,
        }
    }
}

fn parse_count(key: &str, value: &str) -> Result<usize> {
    value
        .trim()
        .parse()
        .with_context(|| format!("invalid value {value:?} for {key}"))
}

impl RunConfig {
    /// Applies one setting. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset_dir" => self.dataset_dir = PathBuf::from(value),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "train_size" => self.train_size = parse_count(key, value)?,
            "val_size" => self.val_size = parse_count(key, value)?,
            "test_size" => self.test_size = parse_count(key, value)?,
            _ => {
                if !self.train.set(key, value)? && !self.model.set(key, value)? {
                    bail!("unknown configuration key {key:?}");
                }
            }
        }
        Ok(())
    }

    /// Applies a config file body. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("{origin}:{}: expected `key = value`", i + 1))?;
            self.set(k.trim(), v.trim())
                .with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `key=value` overrides from the command line.
    pub fn apply_overrides(&mut self, items: &[String]) -> Result<()> {
        for item in items {
            let (k, v) = item
                .split_once('=')
                .with_context(|| format!("override {item:?} is not key=value"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train_size < 2 || self.val_size == 0 || self.test_size == 0 {
            bail!("dataset needs at least 2 training samples and non-empty val/test splits");
        }
        Ok(())
    }
}
