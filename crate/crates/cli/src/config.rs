//! Flat key = value config files for scene generation and training.

use std::collections::BTreeMap;

use anyhow::{anyhow, bail, Context, Result};
use spectrarec_core::train::{LossKind, TrainConfig};

/// Parse `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`, got {:?}", lineno + 1, raw))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if map.insert(key.clone(), value).is_some() {
            bail!("line {}: duplicate key {:?}", lineno + 1, key);
        }
    }
    Ok(map)
}

struct KvReader {
    map: BTreeMap<String, String>,
    used: Vec<String>,
}

impl KvReader {
    fn new(map: BTreeMap<String, String>) -> Self {
        Self {
            map,
            used: Vec::new(),
        }
    }

    fn get<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.used.push(key.to_string());
        match self.map.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|e| anyhow!("key {:?}: cannot parse {:?}: {}", key, raw, e)),
        }
    }

    fn finish(self) -> Result<()> {
        for key in self.map.keys() {
            if !self.used.contains(key) {
                bail!(
                    "unknown config key {:?} (valid keys: {})",
                    key,
                    self.used.join(", ")
                );
            }
        }
        Ok(())
    }
}

/// Scene/dataset generation settings.
#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_step: f64,
    pub endmember_count: usize,
    pub blob_count: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub scene_count: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl SceneConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvReader::new(parse_kv(text)?);
        let config = SceneConfig {
            height: kv.get("height", 64usize)?,
            width: kv.get("width", 64usize)?,
            lambda_min: kv.get("lambda_min", 460.0)?,
            lambda_max: kv.get("lambda_max", 720.0)?,
            lambda_step: kv.get("lambda_step", 10.0)?,
            endmember_count: kv.get("endmember_count", 4usize)?,
            blob_count: kv.get("blob_count", 6usize)?,
            noise_sigma: kv.get("noise_sigma", 0.005)?,
            seed: kv.get("seed", 0u64)?,
            scene_count: kv.get("scene_count", 10usize)?,
            train_frac: kv.get("train_frac", 0.6)?,
            val_frac: kv.get("val_frac", 0.1)?,
            test_frac: kv.get("test_frac", 0.3)?,
        };
        kv.finish()?;
        Ok(config)
    }
}

/// Training settings; keys mirror the TrainConfig fields, with the augment
/// sub-config flattened (target_h, target_w, flip_prob, shift_frac,
/// scale_lo, scale_hi, rotate_deg).
pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut kv = KvReader::new(parse_kv(text)?);
    let defaults = TrainConfig::default();
    let loss_raw: String = kv.get("loss", defaults.loss.as_str().to_string())?;
    let config = TrainConfig {
        epochs: kv.get("epochs", defaults.epochs)?,
        lr0: kv.get("lr0", defaults.lr0)?,
        beta1: kv.get("beta1", defaults.beta1)?,
        beta2: kv.get("beta2", defaults.beta2)?,
        eta_min: kv.get("eta_min", defaults.eta_min)?,
        loss: loss_raw
            .parse::<LossKind>()
            .map_err(|e| anyhow!("key \"loss\": {}", e))?,
        mrae_epsilon: kv.get("mrae_epsilon", defaults.mrae_epsilon)?,
        batch_size: kv.get("batch_size", defaults.batch_size)?,
        seed: kv.get("seed", defaults.seed)?,
        fine_tune_epochs: kv.get("fine_tune_epochs", defaults.fine_tune_epochs)?,
        patch: kv.get("patch", defaults.patch)?,
        augment: spectrarec_core::train::AugmentConfig {
            target_h: kv.get("target_h", defaults.augment.target_h)?,
            target_w: kv.get("target_w", defaults.augment.target_w)?,
            flip_prob: kv.get("flip_prob", defaults.augment.flip_prob)?,
            shift_frac: kv.get("shift_frac", defaults.augment.shift_frac)?,
            scale_range: (
                kv.get("scale_lo", defaults.augment.scale_range.0)?,
                kv.get("scale_hi", defaults.augment.scale_range.1)?,
            ),
            rotate_deg: kv.get("rotate_deg", defaults.augment.rotate_deg)?,
        },
    };
    kv.finish()?;
    config
        .validate()
        .map_err(|e| anyhow!("invalid training config: {}", e))?;
    Ok(config)
}

/// Load and parse a train config file, or return defaults when `path` is
/// `None`.
pub fn load_train_config(path: Option<&std::path::Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read config {}", p.display()))?;
            parse_train_config(&text)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_scene_defaults_and_overrides() {
        let config = SceneConfig::parse("height = 32\nscene_count = 5\n# comment\n").unwrap();
        assert_eq!(config.height, 32);
        assert_eq!(config.width, 64);
        assert_eq!(config.scene_count, 5);
    }

    #[test]
    fn rejects_unknown_keys() {
        let err = SceneConfig::parse("heigth = 32\n").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
    }

    #[test]
    fn parses_train_config() {
        let config =
            parse_train_config("epochs = 3\nlr0 = 1e-3\nloss = mrae\nscale_lo = 0.8\n").unwrap();
        assert_eq!(config.epochs, 3);
        assert_eq!(config.loss, LossKind::Mrae);
        assert_eq!(config.augment.scale_range.0, 0.8);
        assert_eq!(config.batch_size, 1);
    }

    #[test]
    fn rejects_invalid_train_values() {
        assert!(parse_train_config("epochs = 0\n").is_err());
        assert!(parse_train_config("loss = l3\n").is_err());
    }
}
