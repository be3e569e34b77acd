//! Merges a JSON config file into the argument list. Keys are flag names
//! (`top_k` or `top-k`); an object stored under a subcommand name applies to
//! that subcommand only. Values already given on the command line win.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::{Map, Value};

/// Returns the config path from `--config FILE` or `--config=FILE`.
fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(rest.into());
        }
    }
    None
}

/// First positional argument, skipping the value of `--config`.
fn subcommand(args: &[OsString]) -> Option<String> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            it.next();
        } else if !s.starts_with('-') {
            return Some(s.into_owned());
        }
    }
    None
}

fn given(args: &[OsString], flag: &str) -> bool {
    let eq = format!("{flag}=");
    args.iter().any(|a| {
        let s = a.to_string_lossy();
        s == flag || s.starts_with(&eq)
    })
}

fn append(out: &mut Vec<OsString>, original: &[OsString], key: &str, value: &Value) -> Result<()> {
    let flag = format!("--{}", key.replace('_', "-"));
    if given(original, &flag) {
        return Ok(());
    }
    let text = match value {
        Value::Bool(true) => {
            out.push(flag.into());
            return Ok(());
        }
        Value::Bool(false) | Value::Null => return Ok(()),
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => Ok(s.clone()),
                Value::Number(n) => Ok(n.to_string()),
                _ => bail!("config key {key:?}: list items must be strings or numbers"),
            })
            .collect::<Result<Vec<_>>>()?
            .join(","),
        Value::Object(_) => bail!("config key {key:?}: nested objects are only allowed per subcommand"),
    };
    out.push(flag.into());
    out.push(text.into());
    Ok(())
}

const SUBCOMMANDS: [&str; 11] = [
    "generate", "route", "index", "prune", "quantize", "search", "eval", "stats", "bench", "losscheck", "toytrain",
];

/// Applies the config file named by `--config`, if any.
pub fn merge_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let root: Map<String, Value> =
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let active = subcommand(&args);
    let mut out = args.clone();
    for (key, value) in &root {
        if SUBCOMMANDS.contains(&key.as_str()) {
            if Some(key) == active.as_ref() {
                let Value::Object(section) = value else {
                    bail!("config section {key:?} must be an object");
                };
                for (k, v) in section {
                    append(&mut out, &args, k, v)?;
                }
            }
            continue;
        }
        append(&mut out, &args, key, value)?;
    }
    Ok(out)
}
