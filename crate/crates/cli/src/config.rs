//! Declarative run configuration: defaults, TOML loading, flag overrides,
//! and verbatim snapshotting into the run directory.

use std::path::{Path, PathBuf};

use lucid_core::degrade::{DegradationKind, DegradationLevel};
use lucid_core::error::{Error, Result};
use lucid_core::train::TrainConfig;
use lucid_core::video::SchedulerConfig;

/// Corpus and sample-generation settings.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Train/val/test ratios.
    pub ratios: (f64, f64, f64),
    /// Clean patch side length for synthetic pairs.
    pub patch: usize,
    /// Paired samples to generate / draw.
    pub pairs: usize,
    pub kinds: Vec<DegradationKind>,
    pub levels: Vec<DegradationLevel>,
    /// Super-resolution factor applied by the degradation pipelines.
    pub scale: u32,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            ratios: (7.0, 2.0, 1.0),
            patch: 320,
            pairs: 200,
            kinds: vec![
                DegradationKind::Noise,
                DegradationKind::MotionBlur,
                DegradationKind::LowLight,
                DegradationKind::Smoke,
            ],
            levels: DegradationLevel::ALL.to_vec(),
            scale: 2,
        }
    }
}

/// The full declarative configuration; every field has a default and the
/// effective merged view is snapshotted verbatim into the run directory.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub train: TrainConfig,
    pub scheduler: SchedulerConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            train: TrainConfig::default(),
            scheduler: SchedulerConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {path:?}: {e}")))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{path:?}: {e}")))
    }

    /// Start from defaults, apply the optional file, then flag overrides.
    pub fn effective(file: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
            cfg.train.seed = s;
        } else {
            cfg.train.seed = cfg.seed;
        }
        Ok(cfg)
    }

    /// Write the effective configuration into the run directory.
    pub fn snapshot(&self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join("config.toml");
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.train.delta_t, 15);
        assert_eq!(back.data.patch, 320);
    }

    #[test]
    fn partial_file_overrides_only_named_fields() {
        let cfg: RunConfig = toml::from_str("seed = 9\n[train]\ndelta_t = 5\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.delta_t, 5);
        assert_eq!(cfg.train.batch_size, RunConfig::default().train.batch_size);
    }

    #[test]
    fn flag_seed_wins_over_file() {
        let dir = std::env::temp_dir().join(format!("lucid_cfg_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("c.toml");
        std::fs::write(&p, "seed = 3\n").unwrap();
        let cfg = RunConfig::effective(Some(&p), Some(42)).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.train.seed, 42);
        let cfg = RunConfig::effective(Some(&p), None).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.seed, 3);
        std::fs::remove_dir_all(&dir).ok();
    }
}
