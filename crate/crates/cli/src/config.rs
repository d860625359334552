//! The merged run configuration and its loading from files and overrides.

use std::path::Path;

use mpformer::data::WorldConfig;
use mpformer::model::ModelConfig;
use mpformer::objectives::TrainConfig;
use mpformer::retrieval::{IvfParams, SearchMode};
use mpformer::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServingConfig {
    pub q_total: usize,
    pub mode: SearchMode,
    /// Build approximate-search structures at index time.
    pub ann: bool,
    pub ivf: IvfParams,
    pub addr: String,
}

impl Default for ServingConfig {
    fn default() -> Self {
        ServingConfig {
            q_total: 300,
            mode: SearchMode::Exact,
            ann: true,
            ivf: IvfParams::default(),
            addr: "127.0.0.1:7878".into(),
        }
    }
}

/// Everything a run depends on. `model.vocab` always follows the world's id
/// ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model initialisation seed. World and batch order have their own
    /// seeds under `world.seed` and `train.seed`.
    pub seed: u64,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub serving: ServingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        let model = ModelConfig {
            vocab: world.vocab(),
            ..ModelConfig::default()
        };
        RunConfig {
            seed: 1,
            world,
            model,
            train: TrainConfig::default(),
            serving: ServingConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `path` (dot separated) in `root`, refusing keys that do not exist.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(path, "is not a config section"))?;
        if !obj.contains_key(*part) {
            return Err(Error::config(path, "unknown field"));
        }
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked above");
    }
    Err(Error::config(path, "empty field path"))
}

/// Maps a deserialisation failure to the field it names, when serde says.
fn config_error(e: impl std::fmt::Display) -> Error {
    let msg = e.to_string();
    let field = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.contains("field"))
        .unwrap_or("config")
        .to_string();
    Error::config(field, msg)
}

impl RunConfig {
    /// Reads a TOML (`.toml`) or JSON file, applies `key.path=value`
    /// overrides and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let file: Value = if p.extension().is_some_and(|e| e == "toml") {
                let t: toml::Value = toml::from_str(&text).map_err(config_error)?;
                serde_json::to_value(t)?
            } else {
                serde_json::from_str(&text).map_err(config_error)?
            };
            let cfg: RunConfig = serde_json::from_value(file).map_err(config_error)?;
            value = serde_json::to_value(cfg)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.as_str(), "override must look like key.path=value"))?;
            set_path(&mut value, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(config_error)?;
        cfg.finish()
    }

    /// Derives the vocabulary and validates every section.
    pub fn finish(mut self) -> Result<Self> {
        self.world.validate()?;
        let vocab = self.world.vocab();
        if self.model.vocab != vocab && self.model.vocab != mpformer::model::Vocab::default() {
            log::warn!("model.vocab is derived from the world config; ignoring the given value");
        }
        self.model.vocab = vocab;
        self.model.validate()?;
        self.train.validate()?;
        if self.serving.q_total < self.model.k {
            return Err(Error::config("serving.q_total", "must be at least model.k"));
        }
        Ok(self)
    }

    pub fn from_value(v: &Value) -> Result<Self> {
        serde_json::from_value::<RunConfig>(v.clone()).map_err(config_error)?.finish()
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_set_nested_fields_and_reject_unknown_ones() {
        let c = RunConfig::load(None, &["model.d=16".into(), "serving.mode=approx".into()]).unwrap();
        assert_eq!(c.model.d, 16);
        assert_eq!(c.serving.mode, SearchMode::Approx);
        let e = RunConfig::load(None, &["model.dd=3".into()]).unwrap_err();
        assert!(e.to_string().contains("model.dd"));
    }

    #[test]
    fn invalid_values_name_their_field() {
        let e = RunConfig::load(None, &["world.n_days=1".into()]).unwrap_err();
        assert!(e.to_string().contains("n_days"), "{e}");
        let e = RunConfig::load(None, &["model.d=\"x\"".into()]).unwrap_err();
        assert!(matches!(e, Error::Config { .. }), "{e}");
    }

    #[test]
    fn vocab_follows_the_world() {
        let c = RunConfig::load(None, &["world.n_items=300".into()]).unwrap();
        assert_eq!(c.model.vocab.items, 300);
    }

    #[test]
    fn round_trips_through_json_and_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_value(&c.to_value()).unwrap(), c);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(RunConfig::load(Some(&p), &[]).unwrap(), c);
    }
}
