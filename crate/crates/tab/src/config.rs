//! Versioned JSON run configuration with dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use tab_core::model::ModelConfig;
use tab_core::synth::SynthConfig;
use tab_core::train::TrainConfig;

use crate::error::{read, CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// The published schema for [`RunConfig`].
pub const SCHEMA: &str = include_str!("../schema/config.v1.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
    /// Held-out evaluation every this many epochs; 0 evaluates the final
    /// epoch only.
    pub every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { batch_size: 8, every: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: SCHEMA_VERSION,
            data: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a config document after applying `overrides`
    /// (`("model.d", "64")`, values parsed as JSON with a string fallback).
    pub fn from_value(mut doc: Value, overrides: &[(String, String)]) -> Result<Self> {
        for (key, raw) in overrides {
            set_dotted(&mut doc, key, raw)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("not valid JSON: {e}")))?;
        Self::from_value(doc, overrides)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let bytes = read(path)?;
        let text = String::from_utf8(bytes).map_err(|_| CliError::Config(format!("{} is not UTF-8", path.display())))?;
        Self::from_json(&text, overrides).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "at `version`: schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.version
            )));
        }
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.data.annotators() != self.model.annotators {
            return Err(CliError::Config(format!(
                "at `model.annotators`: {} but `data.profiles` lists {} annotators",
                self.model.annotators,
                self.data.annotators()
            )));
        }
        if !self.data.image_size.is_multiple_of(self.model.encoder.stride) {
            return Err(CliError::Config(format!(
                "at `data.image_size`: {} is not divisible by the encoder stride {}",
                self.data.image_size, self.model.encoder.stride
            )));
        }
        if self.eval.batch_size == 0 {
            return Err(CliError::Config("at `eval.batch_size`: must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// The model-relevant part only, so that training seeds and epochs do
    /// not invalidate a checkpoint for prediction.
    pub fn model_hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.model).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Sets `doc[a][b]...` for the key `a.b...`; the key must already exist.
pub fn set_dotted(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let unknown = || CliError::Config(format!("at `{key}`: no such config key"));
    let mut node = doc;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part).ok_or_else(unknown)?,
            Value::Array(items) => {
                let i: usize = part.parse().map_err(|_| unknown())?;
                items.get_mut(i).ok_or_else(unknown)?
            }
            _ => return Err(unknown()),
        };
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

pub type Overrides = Vec<(String, String)>;

/// Splits `--a.b value` and `--a.b=value` pairs out of an argument list.
/// Flags without a dot are left for the regular parser.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut pairs = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| f.split('=').next().is_some_and(|k| k.contains('.'))) else {
            rest.push(a);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => pairs.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Config(format!("flag --{flag} needs a value")))?;
                pairs.push((flag.to_string(), v));
            }
        }
    }
    Ok((rest, pairs))
}
