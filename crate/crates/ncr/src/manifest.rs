//! Run manifests: every command that writes outputs drops a `key = value`
//! manifest next to them with the fully resolved configuration, inputs,
//! seeds, engine version and timing. Feeding a train manifest back through
//! `--config` reproduces the run bit-for-bit in single-threaded mode.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{NcrError, Result};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, Default)]
pub struct RunManifest {
    pub command: String,
    pub entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            entries: vec![("engine_version".into(), ENGINE_VERSION.into())],
        }
    }

    pub fn add(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn add_config(&mut self, pairs: &[(String, String)]) -> &mut Self {
        for (k, v) in pairs {
            self.entries.push((format!("config.{k}"), v.clone()));
        }
        self
    }

    pub fn render(&self) -> String {
        let mut out = format!("command = {}\n", self.command);
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

/// Parse a `key = value` config file. Manifest bookkeeping keys are skipped
/// so a train manifest can be fed straight back in; `config.` prefixes are
/// stripped.
pub fn parse_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| NcrError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg: format!("expected `key = value`, got `{raw}`"),
        })?;
        let key = key.trim();
        let value = value.trim();
        let key = key.strip_prefix("config.").unwrap_or(key);
        if matches!(key, "command" | "engine_version" | "wall_seconds")
            || key.starts_with("input.")
            || key.starts_with("output.")
            || key.starts_with("result.")
        {
            continue;
        }
        pairs.push((key.to_string(), value.to_string()));
    }
    // later entries win, mirroring file order
    let mut dedup: BTreeMap<String, String> = BTreeMap::new();
    for (k, v) in pairs {
        dedup.insert(k, v);
    }
    Ok(dedup.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn manifest_round_trips_through_config_parser() {
        let mut m = RunManifest::new("train");
        m.add("input.statements", "/data/x.stmts");
        m.add_config(&[("lr".into(), "0.001".into()), ("seed".into(), "7".into())]);
        m.add("wall_seconds", "12.5");

        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(m.render().as_bytes()).unwrap();
        let pairs = parse_config_file(f.path()).unwrap();
        assert_eq!(pairs, vec![("lr".into(), "0.001".into()), ("seed".into(), "7".into())]);
    }

    #[test]
    fn malformed_config_line_is_an_error() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(b"this is not a pair\n").unwrap();
        assert!(matches!(parse_config_file(f.path()), Err(NcrError::Parse { line: 1, .. })));
    }
}
