use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CsvSchema, SplitSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    /// Label used in results tables; the file stem when empty.
    pub name: String,
    pub split: SplitSpec,
    /// Let validation and test windows take their lookback from the end of
    /// the preceding split.
    pub borrow_lookback: bool,
    pub schema: CsvSchema,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::new(),
            name: String::new(),
            split: SplitSpec::default(),
            borrow_lookback: false,
            schema: CsvSchema::default(),
        }
    }
}

impl DataConfig {
    pub fn label(&self) -> String {
        if self.name.is_empty() {
            self.path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        } else {
            self.name.clone()
        }
    }
}

/// Everything a run needs. `seed` drives both weight initialization and
/// training order; it overrides `model.seed` and `train.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Reads `path` (or defaults when `None`) and applies `key=value`
    /// overrides with dotted keys such as `model.d_model=32`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::config(p.display().to_string(), e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.to_string()))?;
        Ok(cfg.synced())
    }

    /// Copies the run seed into the model and training sections.
    pub fn synced(mut self) -> Self {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.split.validate()?;
        self.model.validate()?;
        self.train.validate()
    }
}

/// Sets `key=value` in `table`, creating intermediate tables. The value is
/// read as a TOML literal and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::config(item, "override must look like key=value"))?;
    let key = key.trim();
    let value = parse_literal(raw.trim());
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(key, "empty key"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
