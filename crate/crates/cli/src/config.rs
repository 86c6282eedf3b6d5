use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::Failure;

/// Starts from `base` (or the serialized `default` when there is none), applies the
/// `PATH=JSON` overrides, and parses the result into `T`.
pub fn resolve<T>(base: Option<Value>, overrides: &[String], default: Option<T>) -> Result<T, Failure>
where
    T: Serialize + DeserializeOwned,
{
    let mut value = match (base, default) {
        (Some(v), _) => v,
        (None, Some(d)) => serde_json::to_value(d).expect("configs serialize"),
        (None, None) => return Err(Failure::usage("this command needs --config")),
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| Failure::usage(format!("config: {e}")))
}

pub fn read_file(path: &Path) -> Result<Value, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

/// `a.b.0.c=VALUE`: VALUE is parsed as JSON, falling back to a plain string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), Failure> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Failure::usage(format!("override `{spec}` is not of the form path=value")))?;
    let new = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (depth, key) in keys.iter().enumerate() {
        let last = depth + 1 == keys.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), new);
                    return Ok(());
                }
                map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let i: usize = key.parse().map_err(|_| Failure::usage(format!("override `{path}`: `{key}` is not an index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(i)
                    .ok_or_else(|| Failure::usage(format!("override `{path}`: index {i} out of range ({len})")))?;
                if last {
                    *slot = new;
                    return Ok(());
                }
                slot
            }
            Value::Null => {
                *node = Value::Object(Default::default());
                let Value::Object(map) = node else { unreachable!() };
                if last {
                    map.insert(key.to_string(), new);
                    return Ok(());
                }
                map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            _ => return Err(Failure::usage(format!("override `{path}`: `{key}` is below a scalar"))),
        };
    }
    Err(Failure::usage(format!("override `{spec}` has an empty path")))
}
