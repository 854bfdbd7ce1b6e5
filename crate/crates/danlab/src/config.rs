//! Flat `key=value` run configuration: schema-validated keys with
//! defaults, optionally overlaid by a plain-text config file and then by
//! command-line overrides. The fully resolved configuration can be
//! echoed back out, making every run directory self-describing.
//!
//! The format is deliberately primitive — one `key=value` per line,
//! full-line `#` comments, no sections, no nesting — so configs stay
//! diffable and parsing needs no dependencies.

use crate::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// One schema entry: a key the command understands and its default.
#[derive(Debug, Clone, Copy)]
pub struct SchemaEntry {
    pub key: &'static str,
    pub default: &'static str,
}

/// Convenience constructor for schema tables.
pub const fn entry(key: &'static str, default: &'static str) -> SchemaEntry {
    SchemaEntry { key, default }
}

/// A resolved configuration: every schema key has a value.
#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

/// Parse `key=value` lines, skipping blank lines and `#` comments.
fn parse_lines(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{origin} line {}: expected key=value, got `{line}`",
                lineno + 1
            )));
        };
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Resolve a configuration: schema defaults, overlaid by the config
    /// file (if any), overlaid by `key=value` override strings. Keys not
    /// in the schema are errors, as are duplicate keys within one layer.
    pub fn resolve(
        schema: &[SchemaEntry],
        file: Option<&Path>,
        overrides: &[String],
    ) -> Result<RunConfig> {
        let mut values: BTreeMap<String, String> = schema
            .iter()
            .map(|e| (e.key.to_string(), e.default.to_string()))
            .collect();
        let known = |key: &str| schema.iter().any(|e| e.key == key);

        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut seen = Vec::new();
            for (key, value) in parse_lines(&text, &path.display().to_string())? {
                if !known(&key) {
                    return Err(Error::Config(format!(
                        "{}: unknown key `{key}` (known: {})",
                        path.display(),
                        schema.iter().map(|e| e.key).collect::<Vec<_>>().join(", ")
                    )));
                }
                if seen.contains(&key) {
                    return Err(Error::Config(format!(
                        "{}: duplicate key `{key}`",
                        path.display()
                    )));
                }
                seen.push(key.clone());
                values.insert(key, value);
            }
        }

        for raw in overrides {
            let parsed = parse_lines(raw, "override")?;
            let Some((key, value)) = parsed.into_iter().next() else {
                return Err(Error::Config(format!("override `{raw}` is empty")));
            };
            if !known(&key) {
                return Err(Error::Config(format!(
                    "unknown key `{key}` (known: {})",
                    schema.iter().map(|e| e.key).collect::<Vec<_>>().join(", ")
                )));
            }
            values.insert(key, value);
        }
        Ok(RunConfig { values })
    }

    /// The raw string value of a schema key.
    pub fn get(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("key `{key}` is not in this command's schema")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| {
            Error::Config(format!("key `{key}`: expected {what}, got `{raw}`"))
        })
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parse(key, "an unsigned integer")
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key, "an unsigned integer")
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parse(key, "a number")
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.get(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            raw => Err(Error::Config(format!(
                "key `{key}`: expected true/false, got `{raw}`"
            ))),
        }
    }

    /// A spatial shape written `32x32` or `24x24x24`.
    pub fn shape(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self.get(key)?;
        let dims: Result<Vec<usize>> = raw
            .split('x')
            .map(|part| {
                part.trim().parse().map_err(|_| {
                    Error::Config(format!(
                        "key `{key}`: expected dims like 32x32, got `{raw}`"
                    ))
                })
            })
            .collect();
        let dims = dims?;
        if dims.is_empty() {
            return Err(Error::Config(format!("key `{key}`: empty shape")));
        }
        Ok(dims)
    }

    /// A comma-separated list of numbers (`0.3,0.5` or `1,2,4`). An
    /// empty string is an empty list.
    pub fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.get(key)?;
        if raw.trim().is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|part| {
                part.trim().parse::<T>().map_err(|_| {
                    Error::Config(format!(
                        "key `{key}`: `{}` is not a valid list element",
                        part.trim()
                    ))
                })
            })
            .collect()
    }

    /// The resolved configuration as sorted `key=value` lines.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (key, value) in &self.values {
            let _ = writeln!(out, "{key}={value}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    const SCHEMA: &[SchemaEntry] =
        &[entry("seed", "7"), entry("xi", "0.5"), entry("mode", "iid"), entry("flag", "false")];

    #[test]
    fn defaults_file_and_overrides_layer_in_order() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\n\nseed = 11\nxi=0.8\n").unwrap();
        let cfg = RunConfig::resolve(SCHEMA, Some(&path), &["xi=0.9".into()]).unwrap();
        assert_eq!(cfg.u64("seed").unwrap(), 11);
        assert_eq!(cfg.f64("xi").unwrap(), 0.9);
        assert_eq!(cfg.get("mode").unwrap(), "iid");
        assert!(!cfg.bool("flag").unwrap());
    }

    #[test]
    fn unknown_keys_are_errors_everywhere() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "sneed=1\n").unwrap();
        assert!(matches!(
            RunConfig::resolve(SCHEMA, Some(&path), &[]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::resolve(SCHEMA, None, &["bogus=1".into()]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn malformed_lines_and_duplicates_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "seed\n").unwrap();
        assert!(RunConfig::resolve(SCHEMA, Some(&path), &[]).is_err());
        std::fs::write(&path, "seed=1\nseed=2\n").unwrap();
        assert!(RunConfig::resolve(SCHEMA, Some(&path), &[]).is_err());
    }

    #[test]
    fn typed_getters_validate_their_values() {
        let cfg = RunConfig::resolve(SCHEMA, None, &["xi=abc".into()]).unwrap();
        assert!(matches!(cfg.f64("xi"), Err(Error::Config(_))));
        assert!(cfg.u64("missing").is_err());

        let shapes: &[SchemaEntry] = &[entry("shape", "32x32"), entry("sites", "1,2,4")];
        let cfg = RunConfig::resolve(shapes, None, &[]).unwrap();
        assert_eq!(cfg.shape("shape").unwrap(), vec![32, 32]);
        assert_eq!(cfg.list::<usize>("sites").unwrap(), vec![1, 2, 4]);
        let cfg = RunConfig::resolve(shapes, None, &["shape=24x24x24".into(), "sites=".into()])
            .unwrap();
        assert_eq!(cfg.shape("shape").unwrap(), vec![24, 24, 24]);
        assert!(cfg.list::<usize>("sites").unwrap().is_empty());
        let cfg = RunConfig::resolve(shapes, None, &["shape=32xfoo".into()]).unwrap();
        assert!(cfg.shape("shape").is_err());
    }

    #[test]
    fn echo_reproduces_the_resolved_configuration() {
        let cfg = RunConfig::resolve(SCHEMA, None, &["seed=3".into()]).unwrap();
        assert_eq!(cfg.echo(), "flag=false\nmode=iid\nseed=3\nxi=0.5\n");
    }
}
