//! Layered run configuration: built-in defaults, then a TOML file, then
//! command-line overrides. Every leaf key remembers which layer set it.
//!
//! ```toml
//! [model]
//! height = 64              # image height in pixels
//! width = 64               # image width in pixels
//! patch = 4                # pixel block folded into channels by the stem
//! channels = [48, 64, 64]  # channel width per level, finest first
//! attention_from = 0       # first level with transformer blocks
//! heads = 2
//! groups = 8               # group-norm groups
//! context_dim = 16         # width of the (all-zero) text context token
//!
//! [train]
//! learning_rate = 1e-4
//! batch_size = 1
//! total_steps = 1000
//! seed = 0
//! schedule_steps = 1000    # diffusion steps T
//! schedule_kind = "linear" # or "cosine"
//! checkpoint_every = 500   # 0 = only the final checkpoint
//!
//! [sample]
//! steps = 50               # DDIM steps
//! window = 4               # frames per temporal window
//! seed = 0
//! temporal_mode = "all-frames" # or "per-frame"
//! noise_mode = "shared"        # "slot-shared" or "independent"
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::diffusion::ModelConfig;
use crate::error::{Error, Result};
use crate::inference::SamplerConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SamplerConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        if self.sample.steps > self.train.schedule_steps {
            return Err(Error::Config(format!(
                "sample.steps ({}) exceeds train.schedule_steps ({})",
                self.sample.steps, self.train.schedule_steps
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Flag,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub provenance: BTreeMap<String, Source>,
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Checks `new` against the default's type; integers are accepted where a
/// float is expected.
fn coerce(key: &str, default: &Value, new: Value) -> Result<Value> {
    match (default, new) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (d, n) if std::mem::discriminant(d) == std::mem::discriminant(&n) => Ok(n),
        (d, n) => Err(Error::Config(format!(
            "key `{key}`: expected {}, got {}",
            type_name(d),
            type_name(&n)
        ))),
    }
}

fn set_leaf(
    merged: &mut Table,
    defaults: &Table,
    provenance: &mut BTreeMap<String, Source>,
    section: &str,
    key: &str,
    value: Value,
    source: Source,
) -> Result<()> {
    let full = format!("{section}.{key}");
    let default = defaults
        .get(section)
        .and_then(|s| s.as_table())
        .and_then(|s| s.get(key))
        .ok_or_else(|| Error::Config(format!("unknown key `{full}`")))?;
    let value = coerce(&full, default, value)?;
    merged
        .get_mut(section)
        .and_then(|s| s.as_table_mut())
        .expect("section exists in defaults")
        .insert(key.to_string(), value);
    provenance.insert(full, source);
    Ok(())
}

/// Parses a `section.key=value` override. The value is read as a TOML value
/// and falls back to a bare string.
pub fn parse_override(s: &str) -> Result<(String, String, Value)> {
    let (path, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form section.key=value")))?;
    let (section, key) = path
        .trim()
        .split_once('.')
        .ok_or_else(|| Error::Config(format!("override key `{path}` needs a section, e.g. train.{path}")))?;
    let raw = raw.trim();
    let value = match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((section.to_string(), key.to_string(), value))
}

/// Merges defaults, the optional file, and `overrides` (later wins).
pub fn parse_config(file: Option<&Path>, overrides: &[String]) -> Result<ResolvedConfig> {
    let defaults: Table = Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
    let mut merged = defaults.clone();
    let mut provenance = BTreeMap::new();
    for (section, body) in &defaults {
        for key in body.as_table().expect("sections are tables").keys() {
            provenance.insert(format!("{section}.{key}"), Source::Default);
        }
    }
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for (section, body) in table {
            let Value::Table(body) = body else {
                return Err(Error::Config(format!("unknown key `{section}` (expected a section)")));
            };
            if !defaults.contains_key(&section) {
                return Err(Error::Config(format!("unknown section `{section}`")));
            }
            for (key, value) in body {
                set_leaf(&mut merged, &defaults, &mut provenance, &section, &key, value, Source::File)?;
            }
        }
    }
    for o in overrides {
        let (section, key, value) = parse_override(o)?;
        set_leaf(&mut merged, &defaults, &mut provenance, &section, &key, value, Source::Flag)?;
    }
    let config: RunConfig = Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(ResolvedConfig { config, provenance })
}
