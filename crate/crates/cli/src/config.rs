use std::path::{Path, PathBuf};

use poss_core::engine::EngineConfig;
use poss_core::model::ModelConfig;
use poss_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::sweep::SweepSpec;

/// Benchmark knobs that are not part of the engine configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Timed passes per method; the fastest is reported.
    pub runs: usize,
    pub sweep: Option<SweepSpec>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { runs: 3, sweep: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub distilled: Option<PathBuf>,
    /// EAGLE bank that PosS training starts from.
    pub init: Option<PathBuf>,
    /// Bank used by `bench` and by the `poss` cells of a sweep.
    pub bank: Option<PathBuf>,
    /// Single-layer bank for the `single-draft` cells of a sweep.
    pub single_draft_bank: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
}

/// The `--config` file. Every section is optional; unknown keys are errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub engine: EngineConfig,
    pub bench: BenchConfig,
    pub paths: Paths,
    /// Top-level sections present in the file.
    #[serde(skip)]
    pub sections: Vec<String>,
}

impl RunConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let bad = |e: serde_json::Error| CliError::Usage(format!("config {}: {e}", path.display()));
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
        let sections = raw
            .as_object()
            .map(|o| o.keys().cloned().collect())
            .unwrap_or_default();
        let mut cfg: Self = serde_json::from_value(raw).map_err(bad)?;
        cfg.sections = sections;
        Ok(cfg)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// A required input path: absent is a usage error naming the field, a
/// missing file is an artifact error.
pub fn require(path: &Option<PathBuf>, field: &str, flag: &str) -> Result<PathBuf, CliError> {
    let p = path
        .clone()
        .ok_or_else(|| CliError::Usage(format!("paths.{field} is required (set it in the config or pass {flag})")))?;
    if !p.exists() {
        return Err(CliError::Artifact(format!("paths.{field}: {} does not exist", p.display())));
    }
    Ok(p)
}

pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

pub fn set_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}
