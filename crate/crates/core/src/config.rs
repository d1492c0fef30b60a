//! Run configuration: one TOML document covering model, scene, training and
//! benchmark settings, plus dotted-key overrides (`a.b.c=value`).

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::{BenchConfig, SceneConfig, TrainConfig};
use crate::model::ModelConfig;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub scenes: usize,
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            scenes: 5,
            model: ModelConfig::desk_scale(0),
            scene: SceneConfig::default(),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    /// Loads a TOML file over the defaults, then applies overrides, then
    /// stamps the seed into the model config and validates.
    pub fn load(path: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> Result<RunConfig> {
        let mut value = toml::Value::try_from(RunConfig::default())
            .map_err(|e| Error::InvalidConfig(format!("default serialization: {e}")))?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", p.display())))?;
            let file_value: toml::Value = text
                .parse()
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?;
            merge_toml(&mut value, &file_value);
        }
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let mut cfg: RunConfig = value
            .try_into()
            .map_err(|e| Error::InvalidConfig(format!("config does not fit the schema: {e}")))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.model.seed = cfg.seed;
        cfg.model.validate()?;
        if cfg.scenes == 0 {
            return Err(Error::InvalidConfig("scenes must be >= 1".to_string()));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn merge_toml(base: &mut toml::Value, patch: &toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Applies one `dotted.key=value` override. Values parse as bool, integer,
/// float, a bracketed integer list, or fall back to a string.
fn apply_override(value: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override '{spec}' is not key=value")))?;
    let parsed = parse_override_value(raw.trim());
    let mut cursor = value;
    let parts: Vec<&str> = key.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("override '{key}': '{part}' is not a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = table
            .entry(part.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    Ok(())
}

fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    if raw.starts_with('[') && raw.ends_with(']') {
        let items: Vec<toml::Value> = raw[1..raw.len() - 1]
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| parse_override_value(s.trim()))
            .collect();
        return toml::Value::Array(items);
    }
    toml::Value::String(raw.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::load(None, None, &[]).unwrap();
        assert_eq!(cfg.model.decoder.total_instances, 90);
        assert_eq!(cfg.model.decoder.temporal_instances, 60);
        assert_eq!(cfg.scene.cameras, 6);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let overrides = vec![
            "model.decoder.total_instances=12".to_string(),
            "model.decoder.temporal_instances=8".to_string(),
            "scene.fps=4.0".to_string(),
            "train.ablate_temporal=true".to_string(),
            "bench.t_list=[1,3]".to_string(),
        ];
        let cfg = RunConfig::load(None, Some(7), &overrides).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.seed, 7);
        assert_eq!(cfg.model.decoder.total_instances, 12);
        assert_eq!(cfg.scene.fps, 4.0);
        assert!(cfg.train.ablate_temporal);
        assert_eq!(cfg.bench.t_list, vec![1, 3]);
    }

    #[test]
    fn bad_overrides_and_configs_error() {
        assert!(RunConfig::load(None, None, &["nonsense".to_string()]).is_err());
        assert!(RunConfig::load(
            None,
            None,
            &["model.decoder.temporal_instances=90".to_string()]
        )
        .is_err());
    }

    #[test]
    fn file_round_trip() {
        let cfg = RunConfig::default();
        let dir = std::env::temp_dir().join("sparse_fuse_cfg_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.toml");
        std::fs::write(&path, cfg.to_toml()).unwrap();
        let loaded = RunConfig::load(Some(&path), None, &[]).unwrap();
        assert_eq!(loaded.to_toml(), cfg.to_toml());
    }
}
