//! `--config file.toml`: top-level keys mirror global flags, and a table
//! named after a subcommand mirrors that subcommand's flags.
//!
//! Config values are spliced into argv ahead of the user's own flags, and a
//! flag given on the command line overrides the same flag from the file.

use std::ffi::OsString;
use std::path::Path;

use crate::Fault;

pub const SUBCOMMANDS: [&str; 6] = ["parse", "reward", "eval", "sample", "build-sft", "train-sim"];

/// Global flags that consume a following value.
const GLOBAL_VALUE_FLAGS: [&str; 6] = ["--config", "--log-level", "--out-dir", "--seed", "--w-result", "--w-format"];

/// Position of the subcommand token, skipping global flags and their values.
pub fn subcommand_position(args: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a.starts_with('-') {
            if GLOBAL_VALUE_FLAGS.contains(&a.as_ref()) {
                i += 1;
            }
        } else if SUBCOMMANDS.contains(&a.as_ref()) {
            return Some(i);
        } else {
            return None;
        }
        i += 1;
    }
    None
}

/// The `--config` path, if any.
pub fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter().skip(1);
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

fn flag_args(table: &toml::Table, section: &str) -> Result<Vec<OsString>, Fault> {
    let mut out = Vec::new();
    for (key, value) in table {
        if key == "config" {
            return Err(Fault::Usage("config files cannot nest --config".into()));
        }
        let flag = format!("--{}", key.replace('_', "-"));
        let rendered = match value {
            toml::Value::Boolean(true) => None,
            toml::Value::Boolean(false) => continue,
            toml::Value::String(s) => Some(s.clone()),
            toml::Value::Integer(i) => Some(i.to_string()),
            toml::Value::Float(f) => Some(f.to_string()),
            toml::Value::Array(items) => {
                let parts: Result<Vec<String>, Fault> = items
                    .iter()
                    .map(|v| match v {
                        toml::Value::String(s) => Ok(s.clone()),
                        toml::Value::Integer(i) => Ok(i.to_string()),
                        toml::Value::Float(f) => Ok(f.to_string()),
                        _ => Err(Fault::Usage(format!("config {section}.{key}: unsupported list item"))),
                    })
                    .collect();
                Some(parts?.join(","))
            }
            _ => return Err(Fault::Usage(format!("config {section}.{key}: unsupported value"))),
        };
        out.push(flag.into());
        if let Some(v) = rendered {
            out.push(v.into());
        }
    }
    Ok(out)
}

/// Returns argv with the config file's flags spliced in.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>, Fault> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path)
        .map_err(|e| Fault::Usage(format!("config {}: {e}", path.display())))?;
    let doc: toml::Table = text
        .parse()
        .map_err(|e| Fault::Usage(format!("config {}: {e}", path.display())))?;

    let sub_pos = subcommand_position(&args);
    let sub_name = sub_pos.map(|i| args[i].to_string_lossy().into_owned());
    let mut globals = toml::Table::new();
    let mut section = None;
    for (key, value) in doc {
        match value {
            toml::Value::Table(t) => {
                if !SUBCOMMANDS.contains(&key.as_str()) {
                    return Err(Fault::Usage(format!("config: unknown section [{key}]")));
                }
                if sub_name.as_deref() == Some(key.as_str()) {
                    section = Some(t);
                }
            }
            other => {
                globals.insert(key, other);
            }
        }
    }

    let mut injected = flag_args(&globals, "global")?;
    if let (Some(t), Some(name)) = (section, &sub_name) {
        injected.extend(flag_args(&t, name)?);
    }
    // Global flags are accepted after the subcommand, so everything goes
    // right behind it; without a subcommand only globals apply.
    let at = sub_pos.map_or(1, |i| i + 1);
    let mut out = args[..at].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[at..]);
    Ok(out)
}
