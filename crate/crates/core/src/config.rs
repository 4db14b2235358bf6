//! Run configuration: a TOML file of dotted keys, `key=value` overrides on
//! top, defaults underneath. Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::cbbi::InferenceConfig;
use crate::error::{Error, Result};
use crate::synthgen::WorldSpec;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Evaluation images written by `synth`.
    pub eval_images: usize,
    /// Objects per evaluation image.
    pub eval_classes_per_image: usize,
    /// Support shots per novel class.
    pub shots: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            eval_images: 24,
            eval_classes_per_image: 2,
            shots: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CifssConfig {
    pub sessions: usize,
    pub classes_per_session: usize,
}

impl Default for CifssConfig {
    fn default() -> Self {
        Self {
            sessions: 5,
            classes_per_session: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegisterConfig {
    /// Novel classes to add as one session; empty means every class with
    /// supports in the dataset.
    pub classes: Vec<u32>,
}

/// Input artifacts of the commands that consume them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub registry: Option<PathBuf>,
    /// Feature GFST for `infer`.
    pub features: Option<PathBuf>,
    /// Label GFST scored by `eval` instead of running inference.
    pub predictions: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Also write one PGM image per predicted mask.
    pub pgm: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds the world and the trainer unless `world.seed` / `train.seed`
    /// are given.
    pub seed: u64,
    pub world: WorldSpec,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub infer: InferenceConfig,
    pub cifss: CifssConfig,
    pub register: RegisterConfig,
    pub paths: PathsConfig,
    pub output: OutputConfig,
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {}", raw)
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key '{}'", key)));
    }
    let (last, prefix) = parts.split_last().unwrap();
    let mut cur = table;
    for p in prefix {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{}' in '{}' is not a table", p, key)))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// File (optional) then `key=value` overrides, then defaults for the rest.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {}", p.display(), e)))?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {}", p.display(), e)))?
            }
            None => Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{}' is not key=value", o)))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        Self::from_table(table)
    }

    pub fn from_table(mut table: Table) -> Result<Self> {
        let seed = table.get("seed").cloned();
        if let Some(seed) = seed {
            for section in ["world", "train"] {
                let sub = table
                    .entry(section.to_string())
                    .or_insert_with(|| Value::Table(Table::new()));
                if let Some(sub) = sub.as_table_mut() {
                    sub.entry("seed".to_string()).or_insert(seed.clone());
                }
            }
        }
        let cfg: RunConfig = table.try_into().map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        if self.data.shots == 0 {
            return Err(Error::Config("data.shots must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Resolved configuration as TOML, for echoing next to outputs.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        path.as_deref()
            .ok_or_else(|| Error::Config(format!("missing required setting {}", key)))
    }
}
