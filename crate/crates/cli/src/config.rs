//! Layered configuration: defaults < config file < `VIDSPARSE__` environment
//! overrides < command-line flags. Every layer is a JSON value merged into
//! the previous one; the result must deserialize into the command's config.

use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Environment prefix; `__` also separates nested keys
/// (`VIDSPARSE__GRID__FRAMES=4`).
pub const ENV_PREFIX: &str = "VIDSPARSE__";

/// Failure classes with their process exit codes; infeasible plans (3)
/// surface as planner errors.
#[derive(Debug)]
pub enum Fail {
    Io(String),
    Config(String),
    Numerical(String),
}

impl Fail {
    pub fn code(&self) -> u8 {
        match self {
            Fail::Io(_) => 1,
            Fail::Config(_) => 2,
            Fail::Numerical(_) => 4,
        }
    }
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fail::Io(m) => write!(f, "I/O error: {m}"),
            Fail::Config(m) => write!(f, "configuration error: {m}"),
            Fail::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for Fail {}

/// Recursive object merge; any non-object value in `top` replaces `base`.
pub fn merge(base: &mut Value, top: Value) {
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

/// Sets `value` at a nested key path, creating objects on the way.
pub fn set_path(root: &mut Value, path: &[String], value: Value) {
    let mut nested = value;
    for key in path.iter().rev() {
        let mut m = Map::new();
        m.insert(key.clone(), nested);
        nested = Value::Object(m);
    }
    merge(root, nested);
}

/// Overrides from `VIDSPARSE__*` variables. Values parse as JSON when they
/// can (numbers, booleans, objects) and are strings otherwise.
pub fn env_layer(vars: &[(String, String)]) -> Value {
    let mut out = Value::Object(Map::new());
    let mut sorted: Vec<&(String, String)> = vars.iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    sorted.sort();
    for (k, v) in sorted {
        let path: Vec<String> = k[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
        if path.iter().any(String::is_empty) {
            continue;
        }
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.clone()));
        set_path(&mut out, &path, value);
    }
    out
}

pub fn read_json(path: &Path) -> Result<Value, Fail> {
    let text = std::fs::read_to_string(path).map_err(|e| Fail::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Fail::Config(format!("{}: {e}", path.display())))
}

/// Merges the layers over `T::default()` and deserializes the result.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(layers: Vec<Value>) -> Result<(T, Value), Fail> {
    let mut value = serde_json::to_value(T::default()).map_err(|e| Fail::Config(e.to_string()))?;
    for layer in layers {
        merge(&mut value, layer);
    }
    let parsed: T = serde_json::from_value(value).map_err(|e| Fail::Config(e.to_string()))?;
    // Re-serialize so the recorded config is canonical.
    let canonical = serde_json::to_value(&parsed).map_err(|e| Fail::Config(e.to_string()))?;
    Ok((parsed, canonical))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;
    use serde_json::json;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Inner {
        a: u64,
        b: f64,
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Outer {
        seed: u64,
        inner: Inner,
        name: String,
    }

    #[test]
    fn later_layers_win() {
        let file = json!({"seed": 1, "inner": {"a": 2, "b": 0.5}});
        let env = env_layer(&[("VIDSPARSE__INNER__A".into(), "7".into()), ("VIDSPARSE__NAME".into(), "x y".into())]);
        let flags = json!({"seed": 9});
        let (cfg, _): (Outer, _) = resolve(vec![file, env, flags]).unwrap();
        assert_eq!(cfg, Outer { seed: 9, inner: Inner { a: 7, b: 0.5 }, name: "x y".into() });
    }

    #[test]
    fn unrelated_env_is_ignored_and_unknown_keys_fail() {
        let env = env_layer(&[("HOME".into(), "/root".into()), ("VIDSPARSE_SEED".into(), "3".into())]);
        assert_eq!(env, json!({}));
        let err = resolve::<Outer>(vec![json!({"sed": 1})]).unwrap_err();
        assert_eq!(err.code(), 2);
    }
}
