//! Layered configuration: defaults or a base document, an optional JSON
//! file, then `key=value` overrides addressed by dotted paths.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

/// Applies `file` (a complete or partial JSON document) and then each
/// `key=value` override on top of `base`. Unknown keys are rejected.
pub fn resolve<T: Serialize + DeserializeOwned>(
    base: &T,
    file: Option<&Path>,
    overrides: &[String],
) -> Result<T, CliError> {
    let mut doc = serde_json::to_value(base).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| {
            CliError::Usage(format!("config {} is not valid JSON: {e}", path.display()))
        })?;
        merge(&mut doc, patch, "")?;
    }
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{item}` is not key=value")))?;
        set(&mut doc, key.trim(), raw.trim())?;
    }
    serde_json::from_value(doc).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
}

fn merge(doc: &mut Value, patch: Value, path: &str) -> Result<(), CliError> {
    match (doc, patch) {
        (Value::Object(target), Value::Object(source)) => {
            for (k, v) in source {
                let full = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                let slot = target
                    .get_mut(&k)
                    .ok_or_else(|| CliError::Usage(format!("unknown config key `{full}`")))?;
                merge(slot, v, &full)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn set(doc: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let mut slot = doc;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?;
    }
    // Bare words such as `biam_full` are taken as strings.
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
