//! The single JSON run config and its command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dermclass::augment::AugmentConfig;
use dermclass::model::NetworkConfig;
use dermclass::synthetic::SyntheticConfig;
use dermclass::training::{OptimizerConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: PathBuf,
    pub image_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            manifest: "HAM10000_metadata.csv".into(),
            image_dir: "images".into(),
            output_dir: "run".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratio: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            seed: 0,
            stratified: false,
        }
    }
}

/// Which class counts the loss weights are computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    #[default]
    Capped,
    Precap,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub split: SplitConfig,
    pub cap: usize,
    pub augment: AugmentConfig,
    pub network: NetworkConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub class_weight_source: WeightSource,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            split: SplitConfig::default(),
            cap: 450,
            augment: AugmentConfig::default(),
            network: NetworkConfig::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainConfig::default(),
            class_weight_source: WeightSource::Capped,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed_split: Option<u64>,
    pub seed_augment: Option<u64>,
    pub seed_init: Option<u64>,
}

/// Stream tag separating the epoch shuffle from the augmentation draws.
const SHUFFLE_STREAM: u64 = 0x5348_5546;

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config file, resolves relative paths against its directory and
    /// applies flag overrides.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_json(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.paths.manifest,
            &mut cfg.paths.image_dir,
            &mut cfg.paths.output_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(out) = &o.out {
            self.paths.output_dir = out.clone();
        }
        if let Some(s) = o.seed_split {
            self.split.seed = s;
        }
        if let Some(s) = o.seed_augment {
            self.augment.seed = s;
        }
        if let Some(s) = o.seed_init {
            self.network.seed = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split.ratio > 0.0 && self.split.ratio < 1.0) {
            bail!("split.ratio must lie strictly between 0 and 1");
        }
        if self.cap == 0 {
            bail!("cap must be positive");
        }
        self.augment.validate()?;
        self.network.validate()?;
        self.optimizer.validate()?;
        self.train.validate()?;
        self.synthetic.validate()?;
        Ok(())
    }

    /// Training settings with the shuffle seed derived from the augmentation
    /// seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: dermclass::seed::derive_seed(&[self.augment.seed, SHUFFLE_STREAM]),
            ..self.train.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.cap, 450);
        assert_eq!(cfg.split.ratio, 0.8);
        assert_eq!(cfg.optimizer.learning_rate, 0.0006);
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig {
            network: NetworkConfig::toy(),
            class_weight_source: WeightSource::Precap,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"optimiser": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"epoch": 3}}"#).is_err());
    }

    #[test]
    fn flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"split": {"seed": 1}, "augment": {"seed": 2}, "network": {"seed": 3}}"#).unwrap();
        let o = Overrides {
            out: Some("/tmp/x".into()),
            seed_split: Some(10),
            seed_augment: None,
            seed_init: Some(30),
        };
        let cfg = RunConfig::load(&path, &o).unwrap();
        assert_eq!((cfg.split.seed, cfg.augment.seed, cfg.network.seed), (10, 2, 30));
        assert_eq!(cfg.paths.output_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.paths.manifest, dir.path().join("HAM10000_metadata.csv"));
    }
}
