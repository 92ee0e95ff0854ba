//! Declarative pipeline configuration: one JSON document plus flag
//! overrides, with unknown keys rejected. Every stage default lives here and
//! matches the owning module's default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::metrics::{DEFAULT_BOX_HALF_SIZE, DEFAULT_MATCH_RADIUS_MICRONS};
use crate::patchset::{DEFAULT_HARD_NEGATIVE_COUNT, DEFAULT_HARD_NEGATIVE_SIZE, DEFAULT_PATCH_SIZE};
use crate::split::SplitRatios;

/// Environment variable capping detector parallelism. The only environment
/// input the toolkit reads.
pub const MAX_PARALLELISM_ENV: &str = "MITOKIT_MAX_PARALLELISM";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub manifest: PathBuf,
    pub patch_dir: PathBuf,
    pub detections: PathBuf,
    pub report: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            manifest: "manifest.json".into(),
            patch_dir: "patches".into(),
            detections: "detections.ndjson".into(),
            report: "report.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub ratios: SplitRatios,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { ratios: SplitRatios::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub train_size: u32,
    pub hard_negative_size: u32,
    pub hard_negative_count: usize,
    pub tile_size: u32,
    pub overlap: u32,
    pub jitter_max: u32,
    pub negative_min_distance: f64,
    pub seed: u64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            train_size: DEFAULT_PATCH_SIZE,
            hard_negative_size: DEFAULT_HARD_NEGATIVE_SIZE,
            hard_negative_count: DEFAULT_HARD_NEGATIVE_COUNT,
            tile_size: DEFAULT_PATCH_SIZE,
            overlap: 76,
            jitter_max: 50,
            negative_min_distance: 100.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub worker_command: Option<String>,
    pub parallelism: usize,
    pub retry_limit: usize,
    pub timeout_secs: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { worker_command: None, parallelism: 1, retry_limit: 2, timeout_secs: 60 }
    }
}

impl DetectorConfig {
    /// Parallelism after applying the environment cap.
    pub fn effective_parallelism(&self) -> usize {
        let cap = std::env::var(MAX_PARALLELISM_ENV)
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(usize::MAX);
        self.parallelism.min(cap).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub radius_microns: f64,
    pub threshold: f64,
    pub box_half_size: f64,
    pub thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            radius_microns: DEFAULT_MATCH_RADIUS_MICRONS,
            threshold: 0.0,
            box_half_size: DEFAULT_BOX_HALF_SIZE,
            thresholds: (0..20).map(|i| i as f64 / 20.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub split: SplitConfig,
    pub patch: PatchConfig,
    pub augment: AugmentConfig,
    pub detector: DetectorConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: PipelineConfig = serde_json::from_str(&data)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.augment.validate().map_err(|e| Error::Config(format!("augment: {e}")))?;
        if self.patch.overlap >= self.patch.tile_size {
            return Err(Error::Config("patch.overlap must be < patch.tile_size".into()));
        }
        if self.eval.radius_microns <= 0.0 {
            return Err(Error::Config("eval.radius_microns must be > 0".into()));
        }
        if self.detector.parallelism == 0 {
            return Err(Error::Config("detector.parallelism must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_module_defaults() {
        let c = PipelineConfig::default();
        assert_eq!(c.patch.train_size, 380);
        assert_eq!(c.patch.hard_negative_size, 360);
        assert_eq!(c.patch.hard_negative_count, 5000);
        assert_eq!(c.augment.crop_size, 384);
        assert_eq!(c.augment.resize_choices, vec![400, 500, 600]);
        assert_eq!(c.eval.radius_microns, 7.5);
        assert_eq!(c.split.ratios, SplitRatios::default());
    }

    #[test]
    fn round_trip_is_fixed_point() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let c = PipelineConfig::default();
        c.save(&path).unwrap();
        let loaded = PipelineConfig::load(&path).unwrap();
        assert_eq!(loaded, c);
        loaded.save(&path).unwrap();
        assert_eq!(PipelineConfig::load(&path).unwrap(), loaded);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, r#"{"patch": {"train_size": 380, "bogus_key": 1}}"#).unwrap();
        let err = PipelineConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("bogus_key"));
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = PipelineConfig::default();
        c.patch.overlap = 380;
        assert!(c.validate().is_err());
    }
}
