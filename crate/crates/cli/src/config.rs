//! Key = value config files.
//!
//! Entries become flags placed before the command-line flags; entries whose
//! flag already appears on the command line are dropped, so flags win.

use std::fs;

use crate::output::CliError;

fn config_path(args: &[String]) -> Option<String> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

/// One flag with its value (`None` for a switch).
type Entry = (String, Option<String>);

/// Parses `key = value` lines; `#` starts a comment. `true` turns a switch
/// on and `false` leaves it off.
pub fn parse(text: &str) -> Result<Vec<Entry>, CliError> {
    let mut flags = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Core(mechtest_core::Error::Structural(format!(
                "config line {}: expected `key = value`, got `{line}`",
                i + 1
            )))
        })?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        match value {
            "true" => flags.push((format!("--{key}"), None)),
            "false" => {}
            v => flags.push((format!("--{key}"), Some(v.to_string()))),
        }
    }
    Ok(flags)
}

pub fn inject(argv: Vec<String>) -> Result<Vec<String>, CliError> {
    if argv.len() < 2 || argv[1].starts_with('-') {
        return Ok(argv);
    }
    let Some(path) = config_path(&argv[2..]) else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).map_err(|e| CliError::Io(format!("cannot read config {path}: {e}")))?;
    let given = |flag: &str| argv[2..].iter().any(|a| a == flag || a.starts_with(&format!("{flag}=")));
    let mut out = argv[..2].to_vec();
    for (flag, value) in parse(&text)? {
        if !given(&flag) {
            out.push(flag);
            out.extend(value);
        }
    }
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}
