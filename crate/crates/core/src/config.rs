//! Run configuration: one TOML document with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::GenConfig;
use crate::model::ModelConfig;
use crate::motion::LatentSize;
use crate::training::TrainConfig;

/// Training inputs. With no `inputs` the four synthetic fixtures are used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Containers (`.hvae`) or directories of PNG frames.
    pub inputs: Vec<PathBuf>,
    /// Frame rate assigned to image directories.
    pub fps: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Motion latent preset applied on top of `model`; `None` keeps the explicit sizes.
    pub latent_size: Option<LatentSize>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: GenConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            latent_size: Some(LatentSize::Normal),
            model: ModelConfig::desk(),
            train: TrainConfig { lr: 1e-3, warmup_steps: 100, stage1_steps: 1500, stage2_steps: 1500, ..Default::default() },
            gen: GenConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.finish()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("config: {e}")))
    }

    /// Apply `key.path=value` overrides; values are parsed as TOML literals
    /// and fall back to bare strings. Unknown keys are rejected.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::config(format!("config: {e}")))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {o:?} is not of the form key=value")))?;
            set_path(&mut doc, key.trim(), parse_literal(raw.trim()))?;
        }
        let cfg: Self = doc.try_into().map_err(|e: toml::de::Error| Error::config(format!("config: {e}")))?;
        cfg.finish()
    }

    fn finish(mut self) -> Result<Self> {
        if let Some(size) = self.latent_size {
            self.model.set_latent_size(size);
        }
        self.model.validate()?;
        self.train.validate()?;
        self.gen.validate()?;
        Ok(self)
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(doc: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().ok_or_else(|| Error::config("empty override key"))?;
    let mut cur = doc;
    for p in parents {
        cur = cur
            .get_mut(*p)
            .filter(|v| v.is_table())
            .ok_or_else(|| Error::config(format!("unknown config section {p:?} in {key:?}")))?;
    }
    let table = cur.as_table_mut().expect("checked above");
    // Options serialize to nothing when unset, so they cannot be checked for presence.
    const OPTIONAL: [&str; 2] = ["latent_size", "fps"];
    if !table.contains_key(*last) && !OPTIONAL.contains(last) {
        return Err(Error::config(format!("unknown config key {key:?}")));
    }
    table.insert((*last).to_string(), value);
    Ok(())
}
