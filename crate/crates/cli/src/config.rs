//! Flags > config file > defaults, and the resolved-config echo.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Bad invocation: reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn merge(base: &mut Value, over: Value, path: &str) -> Result<(), UsageError> {
    match (base, over) {
        (_, Value::Null) => Ok(()),
        (Value::Object(b), Value::Object(o)) => {
            // empty default objects are open maps
            let open = b.is_empty();
            for (k, v) in o {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None if open => {
                        b.insert(k, v);
                    }
                    None => return Err(UsageError(format!("unknown config key `{key}`"))),
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o;
            Ok(())
        }
    }
}

/// Drops nulls so unset flags do not override anything.
pub fn flags(v: Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.into_iter()
                .filter(|(_, v)| !v.is_null())
                .map(|(k, v)| (k, flags(v)))
                .filter(|(_, v)| !matches!(v, Value::Object(m) if m.is_empty()))
                .collect::<Map<_, _>>(),
        ),
        other => other,
    }
}

pub fn resolve<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, flag_values: Value) -> anyhow::Result<T> {
    let mut v = serde_json::to_value(T::default())?;
    if let Some(p) = file {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
        let from_file: Value =
            serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", p.display())))?;
        if !from_file.is_object() {
            return Err(usage(format!("config {} must be a JSON object", p.display())));
        }
        merge(&mut v, from_file, "")?;
    }
    merge(&mut v, flags(flag_values), "")?;
    serde_json::from_value(v).map_err(|e| usage(format!("invalid configuration: {e}")))
}

pub fn require<T: Clone>(v: &Option<T>, flag: &str) -> anyhow::Result<T> {
    v.clone().ok_or_else(|| usage(format!("missing required `{flag}` (flag or config key)")))
}

/// `<out>.config.json` for file outputs, `<out>/config.json` for directories.
pub fn echo_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("config.json")
    } else {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".config.json");
        out.with_file_name(name)
    }
}

pub fn write_echo<T: Serialize>(path: &Path, command: &str, config: &T) -> anyhow::Result<()> {
    let body = serde_json::json!({ "command": command, "config": config });
    let text = serde_json::to_string_pretty(&body)? + "\n";
    causal_voxel::dataset_io::write_atomic(path, text.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;
    use serde_json::json;
    use std::collections::BTreeMap;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    #[serde(default)]
    struct C {
        n: usize,
        name: Option<String>,
        inner: Inner,
        set: BTreeMap<String, f64>,
    }

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    #[serde(default)]
    struct Inner {
        tol: f64,
        k: usize,
    }

    impl Default for C {
        fn default() -> Self {
            C {
                n: 10,
                name: None,
                inner: Inner::default(),
                set: BTreeMap::new(),
            }
        }
    }

    impl Default for Inner {
        fn default() -> Self {
            Inner { tol: 0.5, k: 3 }
        }
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"n": 20, "inner": {"tol": 0.1}, "name": "file"}"#).unwrap();
        let c: C = resolve(Some(&p), json!({ "name": "flag", "inner": { "k": null }, "set": { "a": 1.0 } })).unwrap();
        assert_eq!(c.n, 20);
        assert_eq!(c.name.as_deref(), Some("flag"));
        assert_eq!(c.inner, Inner { tol: 0.1, k: 3 });
        assert_eq!(c.set["a"], 1.0);
        let d: C = resolve(None, json!({})).unwrap();
        assert_eq!(d, C::default());
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"inner": {"tolerance": 0.1}}"#).unwrap();
        let e = resolve::<C>(Some(&p), json!({})).unwrap_err();
        assert!(e.downcast_ref::<UsageError>().unwrap().0.contains("inner.tolerance"));
    }

    #[test]
    fn echo_paths() {
        assert_eq!(echo_path(Path::new("a/cf.nii"), false), Path::new("a/cf.nii.config.json"));
        assert_eq!(echo_path(Path::new("out"), true), Path::new("out/config.json"));
    }
}
