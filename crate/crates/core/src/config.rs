//! Run configuration: TOML file plus dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lifecycle::LifecycleConfig;
use crate::losses::LossWeights;
use crate::model::{ModelConfig, TrainConfig};
use crate::synthdata::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSteps {
    pub s1: usize,
    pub s2: usize,
    pub s3: usize,
}

impl Default for StageSteps {
    fn default() -> Self {
        StageSteps {
            s1: 500,
            s2: 1000,
            s3: 1000,
        }
    }
}

impl StageSteps {
    pub fn get(&self, stage: u8) -> usize {
        match stage {
            1 => self.s1,
            2 => self.s2,
            3 => self.s3,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lifecycle: LifecycleConfig,
    pub losses: LossWeights,
    pub data: SynthConfig,
    pub train: TrainConfig,
    pub stages: StageSteps,
    /// Output directory; every artifact path is relative to it.
    pub out: PathBuf,
    /// Seeds batch sampling and expert noise during training.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            lifecycle: LifecycleConfig::default(),
            losses: LossWeights::default(),
            data: SynthConfig::default(),
            train: TrainConfig::default(),
            stages: StageSteps::default(),
            out: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lifecycle.validate()?;
        self.losses.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        let (m, l, d) = (&self.model, &self.lifecycle, &self.data);
        if !(l.k_min..=l.k_max).contains(&m.k_init) {
            return Err(Error::Config(format!(
                "model.k_init {} outside [lifecycle.k_min, lifecycle.k_max] = [{}, {}]",
                m.k_init, l.k_min, l.k_max
            )));
        }
        if d.dim != m.d {
            return Err(Error::Config(format!("data.dim {} must equal model.d {}", d.dim, m.d)));
        }
        if d.frames > m.max_frames {
            return Err(Error::Config(format!(
                "data.frames {} exceeds model.max_frames {}",
                d.frames, m.max_frames
            )));
        }
        if d.text_vocab != m.text_vocab {
            return Err(Error::Config(format!(
                "data.text_vocab {} must equal model.text_vocab {}",
                d.text_vocab, m.text_vocab
            )));
        }
        Ok(())
    }

    /// Parses TOML text, applies `key.path=value` overrides and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(format!("config is not valid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Sets `a.b.c=value` inside `root`. The value is read as a TOML literal,
/// falling back to a bare string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let spec = spec.trim_start_matches("--");
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key.path=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}`: `{}` is not a table", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            table.insert(key.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    unreachable!("keys is nonempty")
}
