//! Run configuration and its `key = value` file format.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use dikm_core::{FitConfig, MetricKind, TrainConfig};

/// Landmark counts accepted for a run.
pub const LANDMARK_GRID: [usize; 6] = [9, 16, 25, 36, 49, 64];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub metric: MetricKind,
    pub k: usize,
    pub landmarks: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Samples per fit-refresh chunk; 0 refreshes the whole set at once.
    pub batch_size: usize,
    pub blur_sigma: f64,
    pub stage1_steps: usize,
    pub stage1_refresh_steps: usize,
    pub stage2_steps: usize,
    pub test_rounds: usize,
    pub regularization: f64,
    pub seed: Option<u64>,
    /// Dataset source descriptor, see [`crate::source::DataSource`].
    pub data: Option<String>,
    /// Keep only this many samples per class (stratified, in file order).
    pub per_class: Option<usize>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fit = FitConfig::default();
        let train = TrainConfig::default();
        Self {
            metric: MetricKind::DeformationInvariant,
            k: train.k,
            landmarks: train.landmarks,
            learning_rate: fit.learning_rate,
            epochs: 150,
            batch_size: 64,
            blur_sigma: fit.blur_sigma,
            stage1_steps: fit.stage1_steps,
            stage1_refresh_steps: fit.stage1_refresh_steps,
            stage2_steps: fit.stage2_steps,
            test_rounds: train.test_rounds,
            regularization: train.regularization,
            seed: None,
            data: None,
            per_class: None,
            out: PathBuf::from("out"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("invalid value {value:?} for {key}: {e}"))
}

impl RunConfig {
    /// Parses a config file body. Keys not present keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected `key = value`", n + 1))?;
            cfg.set(key.trim(), value.trim())
                .with_context(|| format!("line {}", n + 1))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "metric" => self.metric = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "landmarks" => self.landmarks = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "blur_sigma" => self.blur_sigma = parse(key, value)?,
            "stage1_steps" => self.stage1_steps = parse(key, value)?,
            "stage1_refresh_steps" => self.stage1_refresh_steps = parse(key, value)?,
            "stage2_steps" => self.stage2_steps = parse(key, value)?,
            "test_rounds" => self.test_rounds = parse(key, value)?,
            "regularization" => self.regularization = parse(key, value)?,
            "seed" => self.seed = Some(parse(key, value)?),
            "data" => self.data = Some(value.to_string()),
            "per_class" => self.per_class = Some(parse(key, value)?),
            "out" => self.out = PathBuf::from(value),
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    /// The config file body; `parse(to_text())` gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("metric", self.metric.name().to_string());
        put("k", self.k.to_string());
        put("landmarks", self.landmarks.to_string());
        put("learning_rate", format!("{:?}", self.learning_rate));
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("blur_sigma", format!("{:?}", self.blur_sigma));
        put("stage1_steps", self.stage1_steps.to_string());
        put(
            "stage1_refresh_steps",
            self.stage1_refresh_steps.to_string(),
        );
        put("stage2_steps", self.stage2_steps.to_string());
        put("test_rounds", self.test_rounds.to_string());
        put("regularization", format!("{:?}", self.regularization));
        if let Some(seed) = self.seed {
            put("seed", seed.to_string());
        }
        if let Some(data) = &self.data {
            put("data", data.clone());
        }
        if let Some(p) = self.per_class {
            put("per_class", p.to_string());
        }
        put("out", self.out.display().to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !LANDMARK_GRID.contains(&self.landmarks) {
            bail!(
                "landmarks must be one of {LANDMARK_GRID:?}, got {}",
                self.landmarks
            );
        }
        if self.k == 0 {
            bail!("k must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bail!("learning rate must be positive, got {}", self.learning_rate);
        }
        if !(self.blur_sigma > 0.0 && self.blur_sigma.is_finite()) {
            bail!("blur sigma must be positive, got {}", self.blur_sigma);
        }
        if !(self.regularization >= 0.0 && self.regularization.is_finite()) {
            bail!(
                "regularization must be non-negative, got {}",
                self.regularization
            );
        }
        Ok(())
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            learning_rate: self.learning_rate,
            stage1_steps: self.stage1_steps,
            stage1_refresh_steps: self.stage1_refresh_steps,
            stage2_steps: self.stage2_steps,
            blur_sigma: self.blur_sigma,
            ..FitConfig::default()
        }
    }

    pub fn train_config(&self, parallel: bool) -> TrainConfig {
        TrainConfig {
            kind: self.metric,
            k: self.k,
            landmarks: self.landmarks,
            fit: self.fit_config(),
            max_epochs: self.epochs,
            batch_size: (self.batch_size > 0).then_some(self.batch_size),
            regularization: self.regularization,
            parallel,
            test_rounds: self.test_rounds,
            ..TrainConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cfg = RunConfig {
            metric: MetricKind::AffineInvariant,
            learning_rate: 5e-4,
            blur_sigma: 0.1 + 0.2,
            seed: Some(u64::MAX),
            data: Some("idx:a b,c".into()),
            per_class: Some(3),
            out: PathBuf::from("some dir/x"),
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let plain = RunConfig::default();
        assert_eq!(RunConfig::parse(&plain.to_text()).unwrap(), plain);
    }

    #[test]
    fn comments_blanks_and_unknown_keys() {
        let cfg = RunConfig::parse("# c\n\n  k = 3 \nmetric=affine\n").unwrap();
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.metric, MetricKind::AffineInvariant);
        assert!(RunConfig::parse("colour = red").is_err());
        assert!(RunConfig::parse("k 3").is_err());
        assert!(RunConfig::parse("k = three").is_err());
    }

    #[test]
    fn landmark_grid_is_enforced() {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.landmarks = 4;
        assert!(cfg.validate().is_err());
    }
}
