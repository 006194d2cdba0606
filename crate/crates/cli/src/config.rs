//! Experiment configuration: one TOML file, every field defaulted, with
//! dotted `key=value` overrides applied on top.

use std::path::{Path, PathBuf};

use negcut::data::SynthConfig;
use negcut::eval::FeatureEmbedderConfig;
use negcut::training::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::error::CliError;

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "NEGCUT_OUT_DIR";
pub const DEFAULT_OUT_ROOT: &str = "runs";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Folder with `domainA/` and `domainB/`; synthetic data when absent.
    pub dataset_dir: Option<PathBuf>,
    pub image_size: u32,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset_dir: None,
            image_size: 64,
            synth: SynthConfig::default(),
        }
    }
}

/// Grid of the `ablate` subcommand; every combination is one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    pub neg_generator: Vec<bool>,
    pub diversity: Vec<bool>,
    pub num_negatives: Vec<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            neg_generator: vec![true, false],
            diversity: vec![true, false],
            num_negatives: vec![64, 128, 256, 512],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub run_name: String,
    /// Root under which `<run_name>/` is created.
    pub out_dir: Option<PathBuf>,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub embedder: FeatureEmbedderConfig,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_name: "negcut".into(),
            out_dir: None,
            train: TrainConfig::default(),
            data: DataConfig::default(),
            embedder: FeatureEmbedderConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return Err(CliError::Config(format!(
                "run_name: must be a non-empty single path component, got {:?}",
                self.run_name
            )));
        }
        self.train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        self.data
            .synth
            .validate()
            .map_err(|e| CliError::Config(format!("data.synth: {e}")))?;
        if self.data.image_size == 0 {
            return Err(CliError::Config("data.image_size: must be positive".into()));
        }
        negcut::eval::Embedder::new(&self.embedder)
            .map_err(|e| CliError::Config(format!("embedder: {e}")))?;
        Ok(())
    }

    /// Output root: explicit value, else the environment, else `runs`.
    pub fn out_root(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_root().join(&self.run_name)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let value: Value = text
            .parse::<toml::Table>()
            .map(Value::Table)
            .map_err(|e| CliError::Config(e.to_string()))?;
        resolve(value, &[])
    }
}

/// Deserializes `value` over the defaults and rejects keys the schema does
/// not know, so a misspelled field never passes silently.
fn resolve(value: Value, overrides: &[(String, Value)]) -> Result<ExperimentConfig, CliError> {
    let mut value = value;
    for (key, v) in overrides {
        set_path(&mut value, key, v.clone())?;
    }
    let cfg: ExperimentConfig = value
        .clone()
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
    let round_trip = Value::try_from(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
    check_known(&value, &round_trip, "")?;
    Ok(cfg)
}

fn check_known(given: &Value, known: &Value, prefix: &str) -> Result<(), CliError> {
    if let (Value::Table(g), Value::Table(k)) = (given, known) {
        for (key, v) in g {
            let path = if prefix.is_empty() {
                key.clone()
            } else {
                format!("{prefix}.{key}")
            };
            match k.get(key) {
                Some(kv) => check_known(v, kv, &path)?,
                None => return Err(CliError::Config(format!("{path}: unknown field"))),
            }
        }
    }
    Ok(())
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("{key}: malformed key")));
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{}: not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), v);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(toml::Table::new()));
    }
    unreachable!("key has at least one part")
}

/// Parses `key=value`; the value is read as a TOML literal, falling back to
/// a plain string.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {s:?} is not key=value")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key, value))
}

/// Defaults, then the file (if any), then overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            Value::Table(
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
            )
        }
        None => Value::Table(toml::Table::new()),
    };
    let parsed = overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = resolve(base, &parsed)?;
    cfg.validate()?;
    Ok(cfg)
}
