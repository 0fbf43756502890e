use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use panoptic4d::model::ModelConfig;
use panoptic4d::supervision::TrainConfig;
use panoptic4d::synthworld::SceneConfig;
use panoptic4d::tracking::{TamTrainConfig, TrackingConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Scenes written by `generate`.
    pub scenes: usize,
    pub seed: u64,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { scenes: 8, seed: 0, scene: SceneConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Ground-truth class excluded from every count.
    pub ignore_class: Option<u16>,
    /// `--oracle` skips scenes with more points than this.
    pub oracle_max_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ignore_class: None, oracle_max_points: 4000 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub training: TrainConfig,
    pub tam_training: TamTrainConfig,
    pub tracking: TrackingConfig,
    pub eval: EvalConfig,
}

fn config_err(field: impl Into<String>, detail: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("`{}`: {detail}", field.into()))
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| config_err("model", e))?;
        self.data.scene.validate().map_err(|e| config_err("data.scene", e))?;
        self.training.validate().map_err(|e| config_err("training", e))?;
        self.tam_training.validate().map_err(|e| config_err("tam_training", e))?;
        self.tracking.validate().map_err(|e| config_err("tracking", e))?;
        if let Some(c) = self.eval.ignore_class {
            if c as usize >= self.data.scene.palette.len() {
                return Err(config_err("eval.ignore_class", format!("class {c} outside the palette")));
            }
        }
        Ok(())
    }

    /// Defaults, overlaid with the JSON file (if any), then with `key=value`
    /// overrides on dot paths. Unknown keys are rejected.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            let file: Value = serde_json::from_str(&text).map_err(|e| config_err(p.display().to_string(), e))?;
            merge(&mut value, file);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| config_err("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| config_err(spec, "expected key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| config_err(keys[..i].join("."), "not an object"))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(config_err(spec, "empty key"))
}
