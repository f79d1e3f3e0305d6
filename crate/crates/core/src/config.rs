//! Model dimensions, loss weights and training hyperparameters.

use crate::error::{config_err, Result};

/// Network widths and resolutions. The defaults target 64x64 images.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Final image resolution; stages run at 1/4, 1/2 and 1/1 of it.
    pub image_size: usize,
    pub d_text: usize,
    pub d_z: usize,
    /// Width of the matching space.
    pub d_m: usize,
    /// Channels of the regional features (at `image_size / 8`).
    pub regional_channels: usize,
    /// Channels of the shallow features (at `image_size / 2`).
    pub shallow_channels: usize,
    pub stage_channels: [usize; 3],
    /// Base width of the discriminators.
    pub ndf: usize,
    /// Number of shape classes seen by the score classifier.
    pub classes: usize,
    /// Scale applied to cosines in the batch matching loss.
    pub gamma: f32,
    pub tau_spatial: f32,
    pub tau_channel: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            d_text: 32,
            d_z: 16,
            d_m: 32,
            regional_channels: 64,
            shallow_channels: 32,
            stage_channels: [64, 32, 16],
            ndf: 16,
            classes: 4,
            gamma: 10.0,
            tau_spatial: 1.0,
            tau_channel: 1.0,
        }
    }
}

impl ModelConfig {
    /// Small widths for fast tests: 32x32 images.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            d_text: 16,
            d_z: 8,
            d_m: 16,
            regional_channels: 16,
            shallow_channels: 8,
            stage_channels: [16, 8, 8],
            ndf: 8,
            ..Self::default()
        }
    }

    pub fn stage_sizes(&self) -> [usize; 3] {
        [self.image_size / 4, self.image_size / 2, self.image_size]
    }

    pub fn regional_size(&self) -> usize {
        self.image_size / 8
    }

    pub fn shallow_size(&self) -> usize {
        self.image_size / 2
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 32 || !s.is_power_of_two() {
            return Err(config_err!("image_size must be a power of two >= 32, got {s}"));
        }
        if self.d_text < 2 || !self.d_text.is_multiple_of(2) {
            return Err(config_err!("d_text must be even and >= 2"));
        }
        for (name, v) in [
            ("d_z", self.d_z),
            ("d_m", self.d_m),
            ("regional_channels", self.regional_channels),
            ("shallow_channels", self.shallow_channels),
            ("ndf", self.ndf),
        ] {
            if v == 0 {
                return Err(config_err!("{name} must be positive"));
            }
        }
        if self.shallow_channels < 2 {
            return Err(config_err!("shallow_channels must be >= 2"));
        }
        if self.stage_channels.iter().any(|&c| c < 2 || c % 2 != 0) {
            return Err(config_err!("stage channels must be even and >= 2"));
        }
        if self.classes < 2 {
            return Err(config_err!("classifier needs at least two classes"));
        }
        for (name, v) in [("gamma", self.gamma), ("tau_spatial", self.tau_spatial), ("tau_channel", self.tau_channel)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(config_err!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let c = &self.stage_channels;
        [
            ("image_size", self.image_size.to_string()),
            ("d_text", self.d_text.to_string()),
            ("d_z", self.d_z.to_string()),
            ("d_m", self.d_m.to_string()),
            ("regional_channels", self.regional_channels.to_string()),
            ("shallow_channels", self.shallow_channels.to_string()),
            ("stage_channels", format!("{},{},{}", c[0], c[1], c[2])),
            ("ndf", self.ndf.to_string()),
            ("classes", self.classes.to_string()),
            ("gamma", self.gamma.to_string()),
            ("tau_spatial", self.tau_spatial.to_string()),
            ("tau_channel", self.tau_channel.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies one `key = value` setting; returns false for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "image_size" => self.image_size = parse(key, value)?,
            "d_text" => self.d_text = parse(key, value)?,
            "d_z" => self.d_z = parse(key, value)?,
            "d_m" => self.d_m = parse(key, value)?,
            "regional_channels" => self.regional_channels = parse(key, value)?,
            "shallow_channels" => self.shallow_channels = parse(key, value)?,
            "stage_channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_>>()?;
                self.stage_channels = parts
                    .try_into()
                    .map_err(|_| config_err!("stage_channels needs three comma-separated widths"))?;
            }
            "ndf" => self.ndf = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "tau_spatial" => self.tau_spatial = parse(key, value)?,
            "tau_channel" => self.tau_channel = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| config_err!("invalid value {value:?} for {key}"))
}

/// Weights of the auxiliary generator terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Anti-identity regularizer.
    pub lambda1: f32,
    /// Batch matching loss.
    pub lambda2: f32,
    /// Word/region correspondence.
    pub lambda3: f32,
    /// Reconstruction.
    pub lambda4: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (i, v) in [self.lambda1, self.lambda2, self.lambda3, self.lambda4].iter().enumerate() {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(config_err!("lambda{} must be a non-negative number, got {v}", i + 1));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub batch_size: usize,
    pub epochs_main: usize,
    pub epochs_dcm: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub eval_every: usize,
    /// Epochs of matching-encoder pretraining.
    pub epochs_pretrain: usize,
    /// Learning rate of the encoder pretraining.
    pub lr_pretrain: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 16,
            epochs_main: 60,
            epochs_dcm: 20,
            weights: LossWeights::default(),
            seed: 0,
            eval_every: 1,
            epochs_pretrain: 20,
            lr_pretrain: 2e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.lr_pretrain.is_finite() && self.lr_pretrain > 0.0) {
            return Err(config_err!("learning rates must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(config_err!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if self.batch_size < 2 {
            return Err(config_err!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.epochs_main == 0 || self.epochs_dcm == 0 || self.epochs_pretrain == 0 {
            return Err(config_err!("epoch counts must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(config_err!("eval_every must be >= 1"));
        }
        self.weights.validate()
    }

    /// Applies one `key = value` setting; returns false for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs_main" => self.epochs_main = parse(key, value)?,
            "epochs_dcm" => self.epochs_dcm = parse(key, value)?,
            "epochs_pretrain" => self.epochs_pretrain = parse(key, value)?,
            "lr_pretrain" => self.lr_pretrain = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "lambda1" => self.weights.lambda1 = parse(key, value)?,
            "lambda2" => self.weights.lambda2 = parse(key, value)?,
            "lambda3" => self.weights.lambda3 = parse(key, value)?,
            "lambda4" => self.weights.lambda4 = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        TrainConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::default().stage_sizes(), [16, 32, 64]);
        assert_eq!(ModelConfig::default().regional_size(), 8);
    }

    #[test]
    fn pairs_round_trip() {
        let cfg = ModelConfig::tiny();
        let pairs = cfg.to_pairs();
        let back = ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        let mut t = TrainConfig::default();
        assert!(t.set("beta1", "1.5").unwrap());
        assert!(t.validate().is_err());
        assert!(!t.set("nope", "1").unwrap());
        assert!(t.set("lr", "abc").is_err());
        let mut m = ModelConfig::default();
        m.image_size = 48;
        assert!(m.validate().is_err());
        assert!(m.set("stage_channels", "8,8").is_err());
        let mut t = TrainConfig::default();
        t.batch_size = 1;
        assert!(t.validate().is_err());
    }
}
