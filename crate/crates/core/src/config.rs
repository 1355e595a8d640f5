//! Layered configuration: defaults < file < environment < explicit overrides.
//!
//! Environment variables use a prefix and `__` for nesting, so
//! `VQUNET_NETWORK__BASE_CHANNELS=32` sets `network.base_channels`.
//! Overrides are `key.path=value`. Values are parsed as TOML literals and
//! fall back to plain strings (`mode=prediction` works unquoted).

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "VQUNET_";

pub fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| Error::Config("empty key".into()))?;
    let mut table = root;
    for (i, key) in parents.iter().enumerate() {
        let entry = table
            .entry(key.clone())
            .or_insert_with(|| Value::Table(Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(Error::Config(format!(
                    "`{}` is not a table",
                    path[..=i].join(".")
                )))
            }
        };
    }
    table.insert(last.clone(), value);
    Ok(())
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Configuration sources, in increasing precedence.
#[derive(Clone, Debug, Default)]
pub struct Layers {
    pub file: Option<Table>,
    pub env: Vec<(String, String)>,
    pub overrides: Vec<String>,
}

impl Layers {
    pub fn from_file(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Some(
                    text.parse::<Table>()
                        .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
                )
            }
            None => None,
        };
        Ok(Self {
            file,
            ..Self::default()
        })
    }

    /// Keeps variables carrying `prefix`.
    pub fn with_env(mut self, prefix: &str, vars: impl IntoIterator<Item = (String, String)>) -> Self {
        self.env = vars
            .into_iter()
            .filter(|(k, _)| k.starts_with(prefix) && k.len() > prefix.len())
            .map(|(k, v)| (k[prefix.len()..].to_string(), v))
            .collect();
        self.env.sort();
        self
    }

    pub fn with_overrides(mut self, overrides: impl IntoIterator<Item = String>) -> Self {
        self.overrides = overrides.into_iter().collect();
        self
    }

    /// Merges every layer over `defaults` and deserializes the result.
    pub fn resolve<T: Serialize + DeserializeOwned>(&self, defaults: &T) -> Result<T> {
        let mut root = Table::try_from(defaults).map_err(|e| Error::Config(format!("defaults: {e}")))?;
        if let Some(file) = &self.file {
            merge(&mut root, file.clone());
        }
        for (key, raw) in &self.env {
            let path: Vec<String> = key.split("__").map(str::to_lowercase).collect();
            set_path(&mut root, &path, parse_value(raw))?;
        }
        for o in &self.overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
            if path.iter().any(String::is_empty) {
                return Err(Error::Config(format!("override `{o}` has an empty key segment")));
            }
            set_path(&mut root, &path, parse_value(raw))?;
        }
        Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Inner {
        depth: usize,
        name: String,
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Cfg {
        lr: f64,
        epochs: usize,
        inner: Inner,
    }

    impl Default for Inner {
        fn default() -> Self {
            Self { depth: 4, name: "a".into() }
        }
    }

    impl Default for Cfg {
        fn default() -> Self {
            Self { lr: 0.1, epochs: 3, inner: Inner::default() }
        }
    }

    fn file(text: &str) -> Layers {
        Layers {
            file: Some(text.parse().unwrap()),
            ..Layers::default()
        }
    }

    #[test]
    fn precedence_is_file_then_env_then_override() {
        let layers = file("epochs = 5\nlr = 0.5\n[inner]\ndepth = 2\n")
            .with_env(
                "VQUNET_",
                [
                    ("VQUNET_EPOCHS".to_string(), "7".to_string()),
                    ("VQUNET_INNER__NAME".to_string(), "env".to_string()),
                    ("OTHER".to_string(), "x".to_string()),
                ],
            )
            .with_overrides(["epochs=9".to_string()]);
        let cfg: Cfg = layers.resolve(&Cfg::default()).unwrap();
        assert_eq!(cfg.epochs, 9);
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.inner, Inner { depth: 2, name: "env".into() });
    }

    #[test]
    fn values_parse_as_toml_with_string_fallback() {
        assert_eq!(parse_value("3"), Value::Integer(3));
        assert_eq!(parse_value("[1, 2]"), Value::Array(vec![Value::Integer(1), Value::Integer(2)]));
        assert_eq!(parse_value("prediction"), Value::String("prediction".into()));
        assert_eq!(parse_value("\"x y\""), Value::String("x y".into()));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = Layers::default()
            .with_overrides(["inner.width=3".to_string()])
            .resolve(&Cfg::default())
            .unwrap_err();
        assert_eq!(err.category(), "config");
        assert!(err.to_string().contains("width"), "{err}");
        let err = Layers::default()
            .with_overrides(["epochs".to_string()])
            .resolve(&Cfg::default())
            .unwrap_err();
        assert!(err.to_string().contains("key=value"));
    }

    #[test]
    fn scalar_cannot_be_indexed() {
        let err = Layers::default()
            .with_overrides(["lr.x=1".to_string()])
            .resolve(&Cfg::default())
            .unwrap_err();
        assert!(err.to_string().contains("not a table"));
    }
}
