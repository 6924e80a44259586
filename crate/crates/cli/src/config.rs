//! Run configuration resolution: defaults, then the TOML file, then flags.

use std::path::Path;

use anyhow::{bail, Context};
use cellsearch::pipeline::RunConfig;
use serde_json::Value;

/// Overlays `top` on `base`, recursing into tables. Keys absent from `base`
/// are reported as unknown, except below `allow_new` prefixes (where the
/// shape depends on a tag, as for the data source).
fn merge(base: &mut Value, top: Value, path: &str, unknown: &mut Vec<String>) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) if p != "data.source" => merge(slot, v, &p, unknown),
                    Some(slot) => *slot = v,
                    None => unknown.push(p),
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Applies a TOML config file over `base`.
pub fn apply_file(base: &RunConfig, path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut value = serde_json::to_value(base)?;
    let mut unknown = Vec::new();
    merge(&mut value, serde_json::to_value(file)?, "", &mut unknown);
    if !unknown.is_empty() {
        bail!("{}: unknown keys {}", path.display(), unknown.join(", "));
    }
    serde_json::from_value(value).with_context(|| format!("invalid settings in {}", path.display()))
}

/// True when the file sets `[data.source]`.
pub fn file_sets_source(path: &Path) -> bool {
    std::fs::read_to_string(path)
        .ok()
        .and_then(|t| toml::from_str::<toml::Table>(&t).ok())
        .is_some_and(|t| t.get("data").and_then(|d| d.get("source")).is_some())
}
