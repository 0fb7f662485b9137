//! Engine configuration.
//!
//! One TOML document (JSON is accepted for `.json` files). Precedence, lowest
//! first: built-in defaults, the config file, `--set key=value` overrides in
//! the order given, then dedicated CLI flags such as `--seed`.
//!
//! ```toml
//! seed = 0
//! output_dir = "runs"
//! [sog]
//! t_start = 800
//! [sog.paca]
//! w_prime = 1.0
//! [cc]
//! t_min = 100
//! [backends]
//! denoiser = "toy"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::{BackendSelection, ToySettings};
use crate::cc::CcConfig;
use crate::diffusion::{make_schedule, Schedule};
use crate::error::PipelineError;
use crate::sog::SogConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule, PipelineError> {
        make_schedule(self.train_steps, self.beta_start, self.beta_end)
            .map_err(|e| PipelineError::Config(format!("schedule: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    /// Scene-level seed for the composition stage. Object seeds live in the
    /// layout.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Upper bound on concurrent object generations and server jobs;
    /// 0 picks the number of CPUs.
    pub workers: usize,
    pub schedule: ScheduleConfig,
    pub sog: SogConfig,
    pub cc: CcConfig,
    pub backends: BackendSelection,
    pub toy: ToySettings,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            workers: 0,
            schedule: ScheduleConfig::default(),
            sog: SogConfig::default(),
            cc: CcConfig::default(),
            backends: BackendSelection::default(),
            toy: ToySettings::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let schedule = self.schedule.build()?;
        let t = schedule.train_steps();
        let mut problems = Vec::new();
        if let Err(e) = self.sog.validate(t) {
            problems.push(e);
        }
        if let Err(e) = self.cc.validate(t) {
            problems.push(e);
        }
        if self.toy.codec_factor == 0 {
            problems.push("toy.codec_factor must be >= 1".into());
        }
        if self.toy.embedding_dim == 0 {
            problems.push("toy.embedding_dim must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::Config(problems.join("; ")))
        }
    }

    pub fn worker_count(&self) -> usize {
        if self.workers > 0 {
            self.workers
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Parses a document and applies `overrides`, then validates.
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self, PipelineError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        Self::from_table(table, overrides)
    }

    pub fn from_json_str(text: &str, overrides: &[(String, String)]) -> Result<Self, PipelineError> {
        let table: toml::Table = serde_json::from_str(text)
            .map_err(|e| PipelineError::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
        Self::from_table(table, overrides)
    }

    /// Loads a config file, or starts from defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, PipelineError> {
        let Some(path) = path else {
            return Self::from_table(toml::Table::new(), overrides);
        };
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text, overrides)
        } else {
            Self::from_toml_str(&text, overrides)
        }
    }

    /// A copy with typed dotted-key overrides applied, validated.
    pub fn with_overrides(&self, overrides: Vec<(String, toml::Value)>) -> Result<Self, PipelineError> {
        let table = toml::Table::try_from(self)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Self::from_values(table, overrides)
    }

    fn from_table(table: toml::Table, overrides: &[(String, String)]) -> Result<Self, PipelineError> {
        let values = overrides
            .iter()
            .map(|(k, v)| (k.clone(), parse_value(v)))
            .collect();
        Self::from_values(table, values)
    }

    fn from_values(mut table: toml::Table, overrides: Vec<(String, toml::Value)>) -> Result<Self, PipelineError> {
        for (key, value) in overrides {
            set_dotted(&mut table, &key, value)?;
        }
        let cfg: EngineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String), PipelineError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("override {s:?} is not key=value")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(PipelineError::Config(format!("override {s:?} has an empty key")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

/// A TOML literal if the text parses as one, otherwise a bare string.
fn parse_value(text: &str) -> toml::Value {
    format!("v = {text}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), PipelineError> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| PipelineError::Config(format!("{key}: {part} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
