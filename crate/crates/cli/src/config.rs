//! Layered configuration: preset, then config file, then `--set` overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::Invalid;

/// Merge `file` (if any) and the dotted `overrides` onto `preset`.
///
/// Every key must name a field of the target type; unknown keys are
/// rejected rather than ignored.
pub fn layered<T: Serialize + DeserializeOwned>(preset: &T, file: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut table = to_table(preset)?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let patch: Table = text
            .parse()
            .map_err(|e| Invalid(format!("config {} is not valid TOML: {e}", path.display())))?;
        merge(&mut table, patch, "")?;
    }
    for spec in overrides {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Invalid(format!("override `{spec}` must look like key.path=value")))?;
        set_dotted(&mut table, key.trim(), parse_value(raw.trim()))?;
    }
    from_table(table)
}

pub fn to_table<T: Serialize>(cfg: &T) -> Result<Table> {
    match Value::try_from(cfg).context("config does not serialize to a table")? {
        Value::Table(t) => Ok(t),
        other => bail!("config serialized to {}, not a table", other.type_str()),
    }
}

pub fn from_table<T: DeserializeOwned>(table: Table) -> Result<T> {
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| anyhow!(Invalid(format!("invalid configuration: {}", e.message()))))
}

pub fn render<T: Serialize>(cfg: &T) -> Result<String> {
    toml::to_string_pretty(cfg).context("cannot render config")
}

fn merge(dst: &mut Table, src: Table, prefix: &str) -> Result<()> {
    for (k, v) in src {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (dst.get_mut(&k), v) {
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s, &path)?,
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
    Ok(())
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Invalid(format!("override key `{key}` is malformed")).into());
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for (i, p) in parents.iter().enumerate() {
        cur = match cur.get_mut(*p) {
            Some(Value::Table(t)) => t,
            Some(_) => {
                return Err(Invalid(format!("override key `{key}`: `{}` is not a section", parts[..=i].join("."))).into())
            }
            None => return Err(Invalid(format!("override key `{key}`: unknown section `{}`", parts[..=i].join("."))).into()),
        };
    }
    cur.insert((*last).to_string(), value);
    Ok(())
}

/// Interpret `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}
