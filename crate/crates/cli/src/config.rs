//! Run configuration: defaults, then a JSON file, then command-line values.

use std::fs;
use std::path::{Path, PathBuf};

use flat_core::data::SyntheticShapesConfig;
use flat_core::evaluation::EpisodeConfig;
use flat_core::model::ModelConfig;
use flat_core::training::{FinetuneConfig, PretrainConfig, Setting};
use flat_core::{FlatError, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Image folder with a `split_spec.json`. Without it the synthetic
    /// dataset is generated in memory.
    pub dir: Option<PathBuf>,
    pub synthetic: SyntheticShapesConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    /// N-way K-shot episodes on novel classes.
    Episodic,
    /// One pass over the fixed test split of a setting.
    Setting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub kind: ProtocolKind,
    pub setting: Option<Setting>,
    pub episodes: EpisodeConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig { kind: ProtocolKind::Episodic, setting: None, episodes: EpisodeConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Copied into every stage's seed when set.
    pub seed: Option<u64>,
    pub out: PathBuf,
    /// Checkpoint read by `finetune` and `evaluate`.
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub protocol: ProtocolConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            out: PathBuf::from("runs/default"),
            checkpoint: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            protocol: ProtocolConfig::default(),
        }
    }
}

/// Overlays `top` onto `base`; objects merge key by key, anything else
/// is replaced.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
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

/// Rejects keys in `user` that the resolved config does not know.
fn check_known(user: &Value, resolved: &Value, path: &str) -> Result<()> {
    if let (Value::Object(u), Value::Object(r)) = (user, resolved) {
        for (k, v) in u {
            let field = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            match r.get(k) {
                Some(rv) => check_known(v, rv, &field)?,
                // optional fields serialize as null and may hold objects
                None => return Err(FlatError::config(field, "unknown field")),
            }
        }
    }
    Ok(())
}

/// `a.b.c=value`; the value is parsed as JSON and falls back to a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| FlatError::config(s, "overrides take the form section.field=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(FlatError::config(s, "override has an empty field name"));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    Ok((key.to_string(), value))
}

fn nest(key: &str, value: Value) -> Value {
    key.rsplit('.').fold(value, |acc, part| {
        let mut m = serde_json::Map::new();
        m.insert(part.to_string(), acc);
        Value::Object(m)
    })
}

/// Command-line values that sit on top of the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub sets: Vec<(String, Value)>,
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides`. Unknown or ill-typed fields
    /// are config errors naming the field.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
        let mut user = Value::Object(Default::default());
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| FlatError::config("--config", format!("cannot read {}: {e}", path.display())))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| FlatError::config("--config", format!("{} is not valid JSON: {e}", path.display())))?;
            if !v.is_object() {
                return Err(FlatError::config("--config", "the config file must hold a JSON object"));
            }
            merge(&mut user, v);
        }
        for (k, v) in &overrides.sets {
            merge(&mut user, nest(k, v.clone()));
        }
        if let Some(seed) = overrides.seed {
            merge(&mut user, nest("seed", seed.into()));
        }
        if let Some(out) = &overrides.out {
            merge(&mut user, nest("out", Value::String(out.display().to_string())));
        }
        let mut resolved = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        check_known(&user, &resolved, "")?;
        merge(&mut resolved, user);
        let mut cfg: RunConfig = serde_json::from_value(resolved).map_err(|e| FlatError::config("config", e.to_string()))?;
        cfg.apply_seed();
        Ok(cfg)
    }

    fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.data.synthetic.seed = s;
            self.pretrain.seed = s;
            self.finetune.seed = s;
            self.protocol.episodes.seed = s;
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
