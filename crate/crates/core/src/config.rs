//! Run configuration file.
//!
//! ```toml
//! [paths]
//! index = "DL_info.csv"          # omit to use the generated scenario
//! test_list = "test_slices.txt"
//! run_dir = "runs/variable"
//!
//! [split]
//! train_fraction = 0.7
//! seed = 0
//!
//! [selftrain]
//! policy = "variable"            # or [90, 85, 80, 75]
//! rounds = 4
//! upsample = true
//!
//! [backend]
//! kind = "synthetic"             # or "external"
//! command = ["python", "detector.py"]
//! ```
//!
//! `SELFTRAIN_INDEX`, `SELFTRAIN_TEST_LIST` and `SELFTRAIN_RUN_DIR`
//! override the corresponding paths.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{build_splits, load_deeplesion_index, read_slice_list, DatasetIndex, SliceKey, SplitSet};
use crate::detector::{DetectorBackend, ExternalBackend, ExternalConfig, SyntheticBackend, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::fusion::FusionConfig;
use crate::mining::SelfTrainConfig;
use crate::policy::PolicySpec;
use crate::scenario::{reference_backend, ScenarioConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub index: Option<PathBuf>,
    pub test_list: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfTrainSection {
    pub policy: PolicySpec,
    /// Defaults to the policy length.
    pub rounds: Option<u32>,
    pub upsample: bool,
    pub intra_patient_mining: bool,
    pub dedup_iou: f64,
    pub remine_mined_slices: bool,
    pub mine_with_ensemble: bool,
    pub seed: u64,
}

impl Default for SelfTrainSection {
    fn default() -> Self {
        let d = SelfTrainConfig::default();
        SelfTrainSection {
            policy: PolicySpec::default(),
            rounds: None,
            upsample: d.upsample,
            intra_patient_mining: d.intra_patient_mining,
            dedup_iou: d.dedup_iou,
            remine_mined_slices: d.remine_mined_slices,
            mine_with_ensemble: d.mine_with_ensemble,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Synthetic,
    External,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(BackendKind::Synthetic),
            "external" => Ok(BackendKind::External),
            _ => Err(Error::Config(format!("unknown backend {s:?}; expected synthetic or external"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub command: Vec<String>,
    pub timeout_secs: f64,
    pub max_line_bytes: usize,
    pub handshake: bool,
    /// Synthetic settings; the reference settings when absent.
    pub synthetic: Option<SyntheticConfig>,
}

impl Default for BackendSection {
    fn default() -> Self {
        let e = ExternalConfig::default();
        BackendSection {
            kind: BackendKind::Synthetic,
            command: Vec::new(),
            timeout_secs: e.timeout_secs,
            max_line_bytes: e.max_line_bytes,
            handshake: e.handshake,
            synthetic: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub split: SplitSection,
    pub selftrain: SelfTrainSection,
    pub fusion: FusionConfig,
    pub eval: EvalConfig,
    pub backend: BackendSection,
    /// Generated index used when `paths.index` is absent.
    pub scenario: ScenarioConfig,
}

impl RunConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{source}: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        // relative paths in the file are relative to the file
        if let Some(base) = path.parent() {
            for p in [&mut cfg.paths.index, &mut cfg.paths.test_list, &mut cfg.paths.run_dir]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Applies `SELFTRAIN_*` path overrides from `get` (normally
    /// `std::env::var`).
    pub fn apply_env_with(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(v) = get("SELFTRAIN_INDEX") {
            self.paths.index = Some(v.into());
        }
        if let Some(v) = get("SELFTRAIN_TEST_LIST") {
            self.paths.test_list = Some(v.into());
        }
        if let Some(v) = get("SELFTRAIN_RUN_DIR") {
            self.paths.run_dir = Some(v.into());
        }
    }

    pub fn apply_env(&mut self) {
        self.apply_env_with(|k| std::env::var(k).ok());
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks values and that every configured input path exists.
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("index", &self.paths.index), ("test_list", &self.paths.test_list)] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(Error::Config(format!("paths.{name}: {} does not exist", p.display())));
                }
            }
        }
        if self.paths.index.is_some() != self.paths.test_list.is_some() {
            return Err(Error::Config("paths.index and paths.test_list must be given together".into()));
        }
        if self.backend.kind == BackendKind::External && self.backend.command.is_empty() {
            return Err(Error::Config("backend.command is required for the external backend".into()));
        }
        if let Some(s) = &self.backend.synthetic {
            s.validate()?;
        }
        self.scenario.validate()?;
        self.selftrain_config()?.validate()
    }

    pub fn selftrain_config(&self) -> Result<SelfTrainConfig> {
        let s = &self.selftrain;
        let policy = s.policy.resolve()?;
        Ok(SelfTrainConfig {
            rounds: s.rounds.unwrap_or(policy.rounds() as u32),
            policy,
            upsample: s.upsample,
            intra_patient_mining: s.intra_patient_mining,
            dedup_iou: s.dedup_iou,
            remine_mined_slices: s.remine_mined_slices,
            mine_with_ensemble: s.mine_with_ensemble,
            fusion: self.fusion,
            eval: self.eval.clone(),
            seed: s.seed,
        })
    }

    /// The index and fully annotated test list: from disk when
    /// configured, otherwise the generated scenario.
    pub fn load_index(&self) -> Result<(DatasetIndex, BTreeSet<SliceKey>)> {
        match (&self.paths.index, &self.paths.test_list) {
            (Some(i), Some(t)) => Ok((load_deeplesion_index(i)?, read_slice_list(t)?)),
            _ => {
                let s = self.scenario.generate()?;
                Ok((s.index, s.test_list))
            }
        }
    }

    pub fn build_splits(&self) -> Result<SplitSet> {
        let (index, test) = self.load_index()?;
        build_splits(&index, &test, self.split.train_fraction, self.split.seed)
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        self.backend
            .synthetic
            .clone()
            .unwrap_or_else(|| reference_backend(self.selftrain.seed))
    }

    pub fn external_config(&self) -> ExternalConfig {
        ExternalConfig {
            command: self.backend.command.clone(),
            timeout_secs: self.backend.timeout_secs,
            max_line_bytes: self.backend.max_line_bytes,
            handshake: self.backend.handshake,
        }
    }

    pub fn build_backend(&self, splits: &SplitSet) -> Result<Box<dyn DetectorBackend>> {
        Ok(match self.backend.kind {
            BackendKind::Synthetic => Box::new(SyntheticBackend::from_splits(self.synthetic_config(), splits)?),
            BackendKind::External => Box::new(ExternalBackend::new(self.external_config())?),
        })
    }

    /// Everything outside `SelfTrainConfig` that determines a run; echoed
    /// into `run.json`. Paths are recorded by file name only so a moved
    /// run directory still resumes.
    pub fn run_context(&self) -> serde_json::Value {
        let name = |p: &Option<PathBuf>| {
            p.as_ref()
                .and_then(|p| p.file_name())
                .map(|f| f.to_string_lossy().into_owned())
        };
        serde_json::json!({
            "index": name(&self.paths.index),
            "test_list": name(&self.paths.test_list),
            "split": self.split,
            "scenario": if self.paths.index.is_none() { serde_json::to_value(&self.scenario).ok() } else { None },
            "backend": {
                "kind": self.backend.kind,
                "command": self.backend.command,
                "synthetic": if self.backend.kind == BackendKind::Synthetic {
                    serde_json::to_value(self.synthetic_config()).ok()
                } else {
                    None
                },
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_from_empty_file() {
        let c = RunConfig::parse("", "t").unwrap();
        let s = c.selftrain_config().unwrap();
        assert_eq!(s.rounds, 4);
        assert_eq!(s.policy.name, "variable");
        assert!(c.validate().is_ok());
    }

    #[test]
    fn sections_parse() {
        let c = RunConfig::parse(
            r#"
[selftrain]
policy = [90, 90, 85, 85]
upsample = false

[eval]
tag_required = true

[backend]
kind = "external"
command = ["detector", "--serve"]
timeout_secs = 5
"#,
            "t",
        )
        .unwrap();
        let s = c.selftrain_config().unwrap();
        assert_eq!(s.policy.thresholds, vec![0.90, 0.90, 0.85, 0.85]);
        assert!(!s.upsample);
        assert!(s.eval.tag_required);
        assert_eq!(c.external_config().timeout_secs, 5.0);
    }

    #[test]
    fn unknown_keys_and_missing_paths_are_config_errors() {
        assert!(matches!(RunConfig::parse("[selftrain]\nbogus = 1", "t"), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.paths.index = Some("/definitely/missing.csv".into());
        c.paths.test_list = Some("/definitely/missing.txt".into());
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn env_overrides_paths() {
        let mut c = RunConfig::default();
        c.apply_env_with(|k| (k == "SELFTRAIN_RUN_DIR").then(|| "/tmp/x".to_string()));
        assert_eq!(c.paths.run_dir.as_deref(), Some(Path::new("/tmp/x")));
        assert!(c.paths.index.is_none());
    }
}
