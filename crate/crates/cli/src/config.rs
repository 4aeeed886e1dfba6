//! Resolution of run configurations: defaults, then a JSON config file, then
//! command-line flags (or their `DARN_*` environment variables).

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use darn::{Error, Result};

/// Flag values keyed by dotted config path, e.g. `train.epochs`.
#[derive(Default)]
pub struct Overrides(Vec<(&'static str, Value)>);

impl Overrides {
    pub fn set<T: Serialize>(&mut self, path: &'static str, v: Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((path, serde_json::to_value(v).expect("flag value serializes")));
        }
        self
    }
}

fn merge(base: &mut Value, top: Value, at: &str) -> Result<()> {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => return Err(Error::Contract(format!("unknown config key `{path}`"))),
                }
            }
            Ok(())
        }
        (b, t) => {
            *b = t;
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, path: &str, v: Value) {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .as_object_mut()
            .expect("config sections are objects")
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    cur.as_object_mut()
        .expect("config sections are objects")
        .insert(parts[parts.len() - 1].to_string(), v);
}

fn config_err(detail: impl Into<String>) -> Error {
    Error::Config {
        field: "config".into(),
        reason: detail.into(),
    }
}

/// `T::default()` overlaid with the file at `file` and then with `flags`.
/// Unknown keys in the file are rejected.
pub fn resolve<T>(file: Option<&Path>, flags: Overrides) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut value = serde_json::to_value(T::default()).expect("defaults serialize");
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let parsed: Value = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "config file",
            detail: format!("{}: {e}", path.display()),
        })?;
        if !parsed.is_object() {
            return Err(config_err(format!("{}: top level must be a JSON object", path.display())));
        }
        merge(&mut value, parsed, "").map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    }
    for (path, v) in flags.0 {
        set_path(&mut value, path, v);
    }
    serde_json::from_value(value).map_err(|e| config_err(e.to_string()))
}

/// Writes the resolved configuration as `config.json` in `dir`.
pub fn echo<T: Serialize>(dir: &Path, cfg: &T) -> Result<()> {
    let p = dir.join("config.json");
    let mut text = serde_json::to_string_pretty(cfg).expect("config serializes");
    text.push('\n');
    fs::write(&p, text).map_err(|e| Error::Io { path: p, source: e })
}
