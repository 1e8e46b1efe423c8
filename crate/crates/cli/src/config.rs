//! `key = value` config files, spliced into the argument list so that flags
//! given on the command line win.

use std::ffi::OsString;
use std::path::Path;

const SUBCOMMANDS: [&str; 6] = ["synthesize", "train", "denoise", "decompose", "eval", "cascade"];

/// Parses a flat config file. Blank lines and `#` comments are skipped; keys
/// may use `_` or `-`.
pub fn parse(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("line {}: expected `key = value`, got `{raw}`", i + 1));
        };
        let key = key.trim().replace('_', "-");
        let value = value.trim().trim_matches('"').to_string();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(format!("line {}: bad key `{key}`", i + 1));
        }
        if key == "config" {
            return Err(format!(
                "line {}: config files cannot include other config files",
                i + 1
            ));
        }
        out.push((key, value));
    }
    Ok(out)
}

/// Value of `--config` in `argv`, if any.
fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

/// Index just past the subcommand token.
fn after_subcommand(argv: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let s = argv[i].to_string_lossy();
        if s == "--config" || s == "--threads" {
            i += 2;
            continue;
        }
        if SUBCOMMANDS.contains(&s.as_ref()) {
            return Some(i + 1);
        }
        if !s.starts_with('-') {
            return None;
        }
        i += 1;
    }
    None
}

/// Inserts the config file entries as `--key=value` right after the
/// subcommand, ahead of the user's own flags.
pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let entries = parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let Some(at) = after_subcommand(&argv) else {
        return Ok(argv);
    };
    let mut out = argv[..at].to_vec();
    out.extend(entries.iter().map(|(k, v)| OsString::from(format!("--{k}={v}"))));
    out.extend_from_slice(&argv[at..]);
    Ok(out)
}
