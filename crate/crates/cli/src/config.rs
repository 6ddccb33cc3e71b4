//! `key=value` config files, spliced into the argument list right after the
//! subcommand so that later command-line flags override them.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use sdanet::{Error, Result};

const GLOBAL_SWITCHES: [&str; 2] = ["--tsv", "--sequential"];

/// Flags from a config file, in file order. Blank lines and `#` comments are
/// skipped; `true`/`false` values toggle switches.
pub fn parse(text: &str) -> Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!("config line {}: expected key=value, got {line:?}", n + 1)));
        };
        let key = key.trim().trim_start_matches("--");
        if key.is_empty() {
            return Err(Error::Config(format!("config line {}: empty key", n + 1)));
        }
        match value.trim() {
            "true" => out.push(format!("--{key}").into()),
            "false" => {}
            v => {
                out.push(format!("--{key}").into());
                out.push(v.into());
            }
        }
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Index of the subcommand name: the first token that is neither a global
/// switch nor the config option and its value.
fn subcommand_index(args: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let s = args[i].to_string_lossy();
        if s == "--config" {
            i += 2;
        } else if s.starts_with("--config=") || GLOBAL_SWITCHES.contains(&s.as_ref()) {
            i += 1;
        } else if s.starts_with('-') {
            return None;
        } else {
            return Some(i);
        }
    }
    None
}

fn read(path: &Path) -> Result<Vec<OsString>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text)
}

/// `args` with the config file's flags inserted after the subcommand name.
/// Without a config option, or without a subcommand, returns `args` as is.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let (Some(path), Some(at)) = (config_path(&args), subcommand_index(&args)) else {
        return Ok(args);
    };
    let extra = read(&path)?;
    let mut out = args[..=at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[at + 1..]);
    Ok(out)
}
