//! TOML configuration files and `key=value` overrides.

use std::path::Path;

use segmap_core::Config;

use crate::error::{Error, Result};

/// Reads `path` (or starts from defaults), applies every override in order
/// and validates the result.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_config(&text).map_err(|e| match e {
                Error::Core(segmap_core::Error::Config(msg)) => Error::format(p, msg),
                other => other,
            })?
        }
        None => Config::default(),
    };
    for s in sets {
        cfg = apply_override(&cfg, s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<Config> {
    toml::from_str(text).map_err(|e| config_err(e.message()))
}

pub fn to_toml(cfg: &Config) -> String {
    toml::to_string(cfg).expect("configuration serializes to TOML")
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Core(segmap_core::Error::Config(msg.into()))
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string (so `sgm.query_source=logits` works unquoted).
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets one dotted key, e.g. `scene.n_frames=4`. Unknown keys are errors.
pub fn apply_override(cfg: &Config, kv: &str) -> Result<Config> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{kv}` is not of the form key=value")))?;
    let key = key.trim();
    let mut root = toml::Value::try_from(cfg).expect("configuration serializes to TOML");
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = &mut root;
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| config_err(format!("unknown configuration key `{key}`")))?;
        let slot = table
            .get_mut(*part)
            .ok_or_else(|| config_err(format!("unknown configuration key `{key}`")))?;
        if i + 1 == parts.len() {
            if slot.is_table() {
                return Err(config_err(format!("`{key}` is a section, not a value")));
            }
            *slot = parse_value(raw.trim());
            break;
        }
        node = slot;
    }
    root.try_into()
        .map_err(|e: toml::de::Error| config_err(format!("invalid value for `{key}`: {}", e.message())))
}
