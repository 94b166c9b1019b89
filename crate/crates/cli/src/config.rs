//! Training config resolution: defaults, then a TOML file, then flags.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::{Map, Value};

use cprc::train::{AblationMode, TrainConfig};

/// Values given by dedicated flags. They win over `--set` and the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub epochs: Option<usize>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub tau: Option<f64>,
    pub k_augment: Option<usize>,
    pub mode: Option<AblationMode>,
    pub seed: Option<u64>,
}

/// Dotted names of every settable option, sorted.
pub fn known_keys() -> Vec<String> {
    let defaults = serde_json::to_value(TrainConfig::default()).expect("default config serializes");
    let mut keys = Vec::new();
    leaf_keys(&defaults, "", &mut keys);
    keys.sort();
    keys
}

fn leaf_keys(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaf_keys(child, &key, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

fn check_key(key: &str, known: &[String]) -> Result<()> {
    if known.iter().any(|k| k == key) {
        Ok(())
    } else {
        bail!("unknown config key `{key}`; known keys: {}", known.join(", "))
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) {
    let mut node = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let map = node.as_object_mut().expect("known keys only traverse objects");
        if parts.peek().is_none() {
            map.insert(part.to_string(), value);
            return;
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
}

/// A `--set` value: JSON when it parses (numbers, booleans, null, quoted
/// strings), otherwise the raw text as a string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

pub fn resolve(file: Option<&Path>, sets: &[String], flags: &Overrides) -> Result<TrainConfig> {
    let known = known_keys();
    let mut root = serde_json::to_value(TrainConfig::default())?;

    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let file_value = serde_json::to_value(table)?;
        let mut keys = Vec::new();
        leaf_keys(&file_value, "", &mut keys);
        for key in keys {
            check_key(&key, &known)?;
            let mut v = &file_value;
            for part in key.split('.') {
                v = &v[part];
            }
            set_path(&mut root, &key, v.clone());
        }
    }

    for item in sets {
        let (key, raw) = item.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{item}`"))?;
        let key = key.trim();
        check_key(key, &known)?;
        set_path(&mut root, key, parse_value(raw.trim()));
    }

    let mut named: Vec<(&str, Value)> = Vec::new();
    if let Some(v) = flags.epochs {
        named.push(("epochs", v.into()));
    }
    if let Some(v) = flags.lambda1 {
        named.push(("loss.lambda1", v.into()));
    }
    if let Some(v) = flags.lambda2 {
        named.push(("loss.lambda2", v.into()));
    }
    if let Some(v) = flags.tau {
        named.push(("loss.tau", v.into()));
    }
    if let Some(v) = flags.k_augment {
        named.push(("augment.k", v.into()));
    }
    if let Some(v) = flags.mode {
        named.push(("mode", serde_json::to_value(v)?));
    }
    if let Some(v) = flags.seed {
        named.push(("seed", v.into()));
    }
    for (key, v) in named {
        set_path(&mut root, key, v);
    }

    let config: TrainConfig = serde_json::from_value(root).context("invalid config value")?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_to_default_config() {
        let c = resolve(None, &[], &Overrides::default()).unwrap();
        assert_eq!(c, TrainConfig::default());
    }

    #[test]
    fn flags_beat_set_and_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "epochs = 7\n[loss]\ntau = 0.3\nlambda2 = 2.0\n").unwrap();
        let sets = vec!["loss.tau=0.4".to_string(), "mode=supervised-only".to_string()];
        let flags = Overrides { tau: Some(0.5), ..Default::default() };
        let c = resolve(Some(&path), &sets, &flags).unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.loss.lambda2, 2.0);
        assert_eq!(c.loss.tau, 0.5);
        assert_eq!(c.mode, AblationMode::SupervisedOnly);
    }

    #[test]
    fn unknown_keys_list_the_known_ones() {
        let err = resolve(None, &["loss.tua=0.2".into()], &Overrides::default()).unwrap_err().to_string();
        assert!(err.contains("loss.tua"));
        assert!(err.contains("loss.tau"));
        assert!(err.contains("model.max_len"));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(resolve(None, &["loss.tau=1.5".into()], &Overrides::default()).is_err());
        assert!(resolve(None, &["epochs=many".into()], &Overrides::default()).is_err());
        assert!(resolve(None, &["epochs".into()], &Overrides::default()).is_err());
    }

    #[test]
    fn optional_keys_accept_numbers_and_null() {
        let c = resolve(None, &["steps_per_epoch=3".into()], &Overrides::default()).unwrap();
        assert_eq!(c.steps_per_epoch, Some(3));
        let c = resolve(None, &["steps_per_epoch=null".into()], &Overrides::default()).unwrap();
        assert_eq!(c.steps_per_epoch, None);
    }
}
