//! Run configuration: every module's settings in one versioned document.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::bootstrap::BootstrapConfig;
use crate::depth::BlobConfig;
use crate::detector::InferenceConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::kernel::KernelConfig;
use crate::selection::SelectionThresholds;
use crate::tracker::TrackerConfig;
use crate::world::io::{read_json, write_json};
use crate::world::WorldConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_BIND: &str = "127.0.0.1:8750";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorMode {
    #[default]
    Oracle,
    Human,
}

impl std::str::FromStr for AnnotatorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "human" => Ok(Self::Human),
            other => Err(Error::Config(format!(
                "annotator must be oracle or human, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationConfig {
    pub mode: AnnotatorMode,
    /// Corner noise of the scripted annotator, in pixels.
    pub oracle_noise: f64,
    pub oracle_seed: u64,
    pub oracle_timeout_secs: f64,
    pub live_timeout_secs: f64,
    pub bind: String,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            mode: AnnotatorMode::Oracle,
            oracle_noise: 1.0,
            oracle_seed: 0,
            oracle_timeout_secs: 5.0,
            live_timeout_secs: 600.0,
            bind: DEFAULT_BIND.to_string(),
        }
    }
}

impl AnnotationConfig {
    pub fn timeout(&self) -> Duration {
        let secs = match self.mode {
            AnnotatorMode::Oracle => self.oracle_timeout_secs,
            AnnotatorMode::Human => self.live_timeout_secs,
        };
        Duration::from_secs_f64(secs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Object groups; each group gets its own detector and table-top scene.
    pub groups: Vec<Vec<usize>>,
    pub supervised_frames: usize,
    pub refinement_frames: usize,
    pub heldout_frames: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            groups: vec![
                vec![0, 1, 2, 3],
                vec![4, 5, 6, 7],
                vec![8, 9, 10, 11],
                vec![12, 13, 14, 15],
                vec![16, 17, 18, 19, 20],
            ],
            supervised_frames: 150,
            refinement_frames: 200,
            heldout_frames: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub world: WorldConfig,
    pub kernel: KernelConfig,
    pub bootstrap: BootstrapConfig,
    pub blob: BlobConfig,
    pub inference: InferenceConfig,
    pub selection: SelectionThresholds,
    pub tracker: TrackerConfig,
    pub eval: EvalConfig,
    pub annotation: AnnotationConfig,
    pub benchmark: BenchmarkConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            world: WorldConfig::default(),
            kernel: KernelConfig::default(),
            bootstrap: BootstrapConfig::default(),
            blob: BlobConfig::default(),
            inference: InferenceConfig::default(),
            selection: SelectionThresholds::default(),
            tracker: TrackerConfig::default(),
            eval: EvalConfig::default(),
            annotation: AnnotationConfig::default(),
            benchmark: BenchmarkConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.world.validate()?;
        self.kernel.validate()?;
        self.bootstrap.validate()?;
        self.blob.validate()?;
        self.inference.validate()?;
        self.selection.validate()?;
        self.tracker.validate()?;
        self.eval.validate()?;
        let a = &self.annotation;
        if !(a.oracle_noise >= 0.0 && a.oracle_timeout_secs > 0.0 && a.live_timeout_secs > 0.0) {
            return Err(Error::Config(
                "annotation noise must be >= 0 and timeouts > 0".into(),
            ));
        }
        let b = &self.benchmark;
        if b.supervised_frames < 1 || b.refinement_frames < 1 || b.heldout_frames < 1 {
            return Err(Error::Config("benchmark frame counts must be >= 1".into()));
        }
        for g in &b.groups {
            if g.is_empty() || g.iter().any(|&c| c >= self.world.num_classes) {
                return Err(Error::Config(format!("invalid benchmark group {g:?}")));
            }
        }
        Ok(())
    }

    /// Sets the master seed; the world prototypes follow it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.world.seed = seed;
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path)?;
        cfg.validate().map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.selection.th_l, 0.3);
        assert_eq!(cfg.selection.th_h, 0.4);
        assert_eq!(cfg.selection.th_m, 0.1);
        assert_eq!(cfg.benchmark.groups.iter().map(Vec::len).sum::<usize>(), 21);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        cfg.save(&p).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"schema_version":1,"selection":{"th_l":0.2}}"#).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.selection.th_l, 0.2);
        assert_eq!(cfg.selection.th_h, 0.4);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        for body in [
            r#"{"schema_version":1,"bogus":3}"#,
            r#"{"schema_version":1,"kernel":{"lamda":0.1}}"#,
            r#"{"schema_version":2}"#,
            r#"{"schema_version":1,"selection":{"th_l":0.5,"th_h":0.4}}"#,
        ] {
            std::fs::write(&p, body).unwrap();
            assert!(
                matches!(RunConfig::load(&p), Err(Error::Schema { .. })),
                "{body}"
            );
        }
    }

    #[test]
    fn annotator_mode_parse() {
        assert_eq!(
            "human".parse::<AnnotatorMode>().unwrap(),
            AnnotatorMode::Human
        );
        assert!("robot".parse::<AnnotatorMode>().is_err());
    }
}
