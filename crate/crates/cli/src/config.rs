//! Run configuration: one TOML file with a section per module.
//!
//! Values are resolved in three layers. Built-in defaults come first, the
//! file overrides them and command-line flags override the file. Unknown
//! keys anywhere are rejected.

use std::path::Path;

use activemt::active_loop::ALConfig;
use activemt::corpus::{CleanConfig, ScriptSet};
use activemt::decoder::DecodeConfig;
use activemt::trainer::TrainConfig;
use activemt::transformer::ModelConfig;
use serde::{Deserialize, Serialize};

/// A problem with the configuration itself; reported with exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainData {
    /// The labeled share kept for active learning.
    #[default]
    Baseline,
    /// The whole training split.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Raw source-language file, one sentence per line.
    pub source: Option<String>,
    /// Raw target-language file aligned with `source`.
    pub target: Option<String>,
    pub dev_size: usize,
    pub test_size: usize,
    /// Share of the training split that starts out labeled.
    pub baseline_fraction: f64,
    pub source_script: String,
    pub target_script: String,
    /// Words removed during cleaning; empty disables stop-word removal.
    pub stop_words: Vec<String>,
    /// Which labeled data `train` uses.
    pub train_on: TrainData,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: None,
            target: None,
            dev_size: 40856,
            test_size: 40858,
            baseline_fraction: 0.7,
            source_script: "ascii".into(),
            target_script: "ascii".into(),
            stop_words: Vec::new(),
            train_on: TrainData::Baseline,
        }
    }
}

impl DataConfig {
    pub fn clean_configs(&self) -> anyhow::Result<(CleanConfig, CleanConfig)> {
        let script = |name: &str| {
            ScriptSet::by_name(name)
                .ok_or_else(|| config_error(format!("unknown script set {name:?} (use ascii or devanagari-latin)")))
        };
        let stop: std::collections::HashSet<String> = self.stop_words.iter().cloned().collect();
        Ok((
            CleanConfig {
                script: script(&self.source_script)?,
                stop_words: stop.clone(),
            },
            CleanConfig {
                script: script(&self.target_script)?,
                stop_words: stop,
            },
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BpeConfig {
    pub source_merges: usize,
    pub target_merges: usize,
}

impl Default for BpeConfig {
    fn default() -> Self {
        Self {
            source_merges: 16000,
            target_merges: 16000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranslateConfig {
    pub beam: usize,
    pub decode: DecodeConfig,
}

impl Default for TranslateConfig {
    fn default() -> Self {
        Self {
            beam: 5,
            decode: DecodeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotationConfig {
    pub bind: String,
    /// How long an annotator may hold a sentence.
    pub lease_seconds: u64,
    /// Stop waiting (the run stays resumable) after this long without any
    /// answer; 0 waits forever.
    pub idle_timeout_seconds: u64,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            lease_seconds: 600,
            idle_timeout_seconds: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub data: DataConfig,
    pub bpe: BpeConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub active_learning: ALConfig,
    pub translate: TranslateConfig,
    pub annotation: AnnotationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 1,
            data: DataConfig::default(),
            bpe: BpeConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            active_learning: ALConfig::default(),
            translate: TranslateConfig::default(),
            annotation: AnnotationConfig::default(),
        };
        c.active_learning.seed = c.seed;
        c
    }
}

/// Parses a flag value the way TOML would, falling back to a plain string.
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` in `table`, creating sections as needed.
pub fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> anyhow::Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| config_error(format!("bad key {path:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_error(format!("{p} in {path:?} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Applies `key=value` overrides.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> anyhow::Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| config_error(format!("override {o:?} is not key=value")))?;
        set_path(table, k.trim(), parse_value(v.trim()))?;
    }
    Ok(())
}

pub fn from_table(table: toml::Table) -> anyhow::Result<RunConfig> {
    let al_seed = table
        .get("active_learning")
        .and_then(|s| s.get("seed"))
        .and_then(toml::Value::as_integer);
    let mut config: RunConfig = table.try_into().map_err(|e: toml::de::Error| config_error(e.to_string()))?;
    if let Some(s) = al_seed {
        if s as u64 != config.seed {
            return Err(config_error(
                "active_learning.seed differs from the top-level seed; set only `seed`",
            ));
        }
    }
    config.active_learning.seed = config.seed;
    validate(&config)?;
    Ok(config)
}

pub fn read_table(path: &Path) -> anyhow::Result<toml::Table> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn validate(c: &RunConfig) -> anyhow::Result<()> {
    let wrap = |r: activemt::Result<()>| r.map_err(|e| config_error(e.to_string()));
    wrap(c.train.validate())?;
    wrap(c.active_learning.validate())?;
    if !(c.data.baseline_fraction > 0.0 && c.data.baseline_fraction < 1.0) {
        return Err(config_error("data.baseline_fraction must lie in (0, 1)"));
    }
    if c.translate.beam == 0 {
        return Err(config_error("translate.beam must be at least 1"));
    }
    c.data.clean_configs()?;
    Ok(())
}

pub fn to_toml(c: &RunConfig) -> String {
    toml::to_string(c).expect("configuration serializes")
}
