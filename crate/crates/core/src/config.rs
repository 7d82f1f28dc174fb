//! Run configuration: every module's settings in one flat `section.key=value` file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::connector::ConnectorConfig;
use crate::error::{Error, Result};
use crate::expressivity::ExpressivityConfig;
use crate::language_decoder::DecoderConfig;
use crate::metrics::OksParams;
use crate::model::{ModelConfig, ANSWER_TOKENS};
use crate::synth_data::GeneratorConfig;
use crate::trainer::TrainConfig;
use crate::vision_encoder::EncoderConfig;

pub const DESK_PRESET: &str = include_str!("../../../configs/desk.cfg");
pub const FULL_PRESET: &str = include_str!("../../../configs/full.cfg");
pub const EXPRESSIVITY_PRESET: &str = include_str!("../../../configs/expressivity.cfg");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    /// Samples generated in total, split into train and val.
    pub count: usize,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            count: 320,
            train_fraction: 0.8,
        }
    }
}

impl DataConfig {
    /// `(train, val)` sample counts.
    pub fn split_counts(&self) -> (usize, usize) {
        let train = ((self.count as f64) * self.train_fraction).round() as usize;
        let train = train.min(self.count);
        (train, self.count - train)
    }

    /// Generator seed of the `i`-th sample.
    pub fn sample_seed(&self, i: usize) -> u64 {
        (self.seed << 32) | i as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Evaluate at most this many samples; 0 means all.
    pub samples: usize,
    pub max_answer_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 0,
            max_answer_len: ANSWER_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataConfig,
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub connector: ConnectorConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub metrics: OksParams,
    pub eval: EvalConfig,
    pub expressivity: ExpressivityConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            data: DataConfig::default(),
            generator: GeneratorConfig::default(),
            encoder: model.encoder,
            connector: model.connector,
            decoder: model.decoder,
            train: TrainConfig::default(),
            metrics: OksParams::default(),
            eval: EvalConfig::default(),
            expressivity: ExpressivityConfig::default(),
        }
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "list",
        Value::Object(_) => "section",
    }
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    if raw.contains(',') && !raw.starts_with('[') {
        Value::Array(raw.split(',').map(|p| parse_scalar(p.trim())).collect())
    } else {
        parse_scalar(raw)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(scalar_text).collect();
            out.push((prefix.to_string(), parts.join(",")));
        }
        other => out.push((prefix.to_string(), scalar_text(other))),
    }
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn number_compatible(old: &Value, new: &Value) -> bool {
    match (old, new) {
        (Value::Number(o), Value::Number(n)) => !(o.is_u64() || o.is_i64()) || n.is_u64() || n.is_i64(),
        _ => false,
    }
}

fn compatible(old: &Value, new: &Value) -> bool {
    match (old, new) {
        (Value::Array(o), Value::Array(n)) => {
            o.len() == n.len() && o.iter().zip(n).all(|(a, b)| compatible(a, b))
        }
        (Value::Number(_), _) => number_compatible(old, new),
        _ => kind(old) == kind(new),
    }
}

impl RunConfig {
    /// Applies `key=value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&self, text: &str, origin: &str) -> Result<RunConfig> {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, raw)) = line.split_once('=') else {
                return Err(Error::Config(format!("{origin}:{}: expected key=value, got {line:?}", i + 1)));
            };
            set_key(&mut tree, key.trim(), parse_value(raw))
                .map_err(|m| Error::Config(format!("{origin}:{}: {m}", i + 1)))?;
        }
        serde_json::from_value(tree).map_err(|e| Error::Config(format!("{origin}: {e}")))
    }

    /// Applies one `key=value` override.
    pub fn set(&self, key: &str, value: &str) -> Result<RunConfig> {
        self.apply_text(&format!("{key}={value}"), "override")
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        RunConfig::default().apply_text(&text, &path.display().to_string())
    }

    /// A named preset (`desk`, `full`, `expressivity`).
    pub fn preset(name: &str) -> Result<RunConfig> {
        let text = match name {
            "desk" => DESK_PRESET,
            "full" => FULL_PRESET,
            "expressivity" => EXPRESSIVITY_PRESET,
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; presets: desk, full, expressivity"
                )))
            }
        };
        RunConfig::default().apply_text(text, name)
    }

    /// Every setting as sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut pairs = Vec::new();
        flatten("", &tree, &mut pairs);
        pairs.sort();
        pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            connector: self.connector.clone(),
            decoder: self.decoder.clone(),
        }
    }

    /// Switches the connector of both the model and the training recipe.
    pub fn with_connector(mut self, mode: crate::connector::ConnectorMode) -> Self {
        self.connector.mode = mode;
        self.train.connector_mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Cross-module consistency, checked before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model_config().validate()?;
        self.train.validate()?;
        self.metrics.validate()?;
        self.expressivity.validate()?;
        if self.data.count == 0 {
            return Err(Error::Config("data.count must be positive".into()));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction <= 1.0) {
            return Err(Error::Config("data.train_fraction must be in (0, 1]".into()));
        }
        if self.generator.image_size != self.encoder.image_size {
            return Err(Error::Config(format!(
                "generator.image_size {} differs from encoder.image_size {}",
                self.generator.image_size, self.encoder.image_size
            )));
        }
        if self.connector.mode != self.train.connector_mode {
            return Err(Error::Config(format!(
                "connector.mode {} differs from train.connector_mode {}",
                self.connector.mode, self.train.connector_mode
            )));
        }
        if self.eval.max_answer_len == 0 {
            return Err(Error::Config("eval.max_answer_len must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        crate::synth_data::hex_digest(json.as_bytes())
    }
}

fn set_key(tree: &mut Value, key: &str, value: Value) -> std::result::Result<(), String> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map: &mut Map<String, Value> = node
            .as_object_mut()
            .ok_or_else(|| format!("{} is not a section", parts[..i].join(".")))?;
        let Some(child) = map.get_mut(*part) else {
            return Err(format!("unknown key {key:?}"));
        };
        node = child;
    }
    if !compatible(node, &value) {
        let expected = match node {
            Value::Array(a) => format!("list of {}", a.len()),
            other => kind(other).to_string(),
        };
        return Err(format!("{key} expects a {expected}, got {value}"));
    }
    *node = value;
    Ok(())
}
