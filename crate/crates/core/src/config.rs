//! Key=value run configuration: a minimal file format (one `key = value`
//! per line, `#` starts a comment) plus a resolver with the precedence
//! command-line flag > config file > built-in default. Every lookup is
//! recorded so the fully resolved configuration can be echoed and written
//! into run manifests.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{MdError, Result};

/// Where a resolved value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Flag,
    File,
    Default,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Flag => "flag",
            Source::File => "file",
            Source::Default => "default",
        }
    }
}

/// Parse config text: blank lines and `#` comments are ignored, everything
/// else must be `key = value`. Duplicate keys are rejected — a silent
/// last-one-wins rule hides copy-paste mistakes.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(MdError::Config(format!(
                "line {}: expected `key = value`, got '{}'",
                lineno + 1,
                raw.trim()
            )));
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(MdError::Config(format!(
                "line {}: empty {} in '{}'",
                lineno + 1,
                if key.is_empty() { "key" } else { "value" },
                raw.trim()
            )));
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(MdError::Config(format!(
                "line {}: duplicate key '{key}'",
                lineno + 1
            )));
        }
    }
    Ok(map)
}

/// Layered settings with recorded lookups.
#[derive(Debug, Default)]
pub struct Settings {
    flags: BTreeMap<String, String>,
    file: BTreeMap<String, String>,
    resolved: BTreeMap<String, (String, Source)>,
}

impl Settings {
    pub fn new() -> Settings {
        Settings::default()
    }

    /// Record a command-line flag value (highest precedence).
    pub fn set_flag(&mut self, key: &str, value: impl Into<String>) {
        self.flags.insert(key.to_string(), value.into());
    }

    pub fn has_flag(&self, key: &str) -> bool {
        self.flags.contains_key(key)
    }

    /// Load the `--config` file (middle precedence).
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| MdError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        self.file = parse_config(&text).map_err(|e| match e {
            MdError::Config(detail) => MdError::Config(format!("{}: {detail}", path.display())),
            other => other,
        })?;
        Ok(())
    }

    /// Resolve `key` as a raw string, recording the outcome for the echo.
    pub fn get(&mut self, key: &str, default: &str) -> String {
        let (value, source) = if let Some(v) = self.flags.get(key) {
            (v.clone(), Source::Flag)
        } else if let Some(v) = self.file.get(key) {
            (v.clone(), Source::File)
        } else {
            (default.to_string(), Source::Default)
        };
        self.resolved.insert(key.to_string(), (value.clone(), source));
        value
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: &str, what: &str) -> Result<T> {
        let raw = self.get(key, default);
        raw.parse().map_err(|_| {
            let source = self.resolved[key].1.as_str();
            MdError::Config(format!(
                "{key} = '{raw}' (from {source}) is not {what}"
            ))
        })
    }

    pub fn get_u64(&mut self, key: &str, default: u64) -> Result<u64> {
        self.parse(key, &default.to_string(), "an unsigned integer")
    }

    pub fn get_usize(&mut self, key: &str, default: usize) -> Result<usize> {
        self.parse(key, &default.to_string(), "an unsigned integer")
    }

    pub fn get_f64(&mut self, key: &str, default: f64) -> Result<f64> {
        let v: f64 = self.parse(key, &default.to_string(), "a number")?;
        if !v.is_finite() {
            return Err(MdError::Config(format!("{key} = {v} is not finite")));
        }
        Ok(v)
    }

    /// Resolve a key that must be one of the listed choices.
    pub fn get_choice(&mut self, key: &str, default: &str, allowed: &[&str]) -> Result<String> {
        let raw = self.get(key, default);
        if allowed.contains(&raw.as_str()) {
            Ok(raw)
        } else {
            Err(MdError::Config(format!(
                "{key} = '{raw}' must be one of {}",
                allowed.join("|")
            )))
        }
    }

    /// Keys present in the config file that no lookup ever consulted —
    /// almost always typos. Commands call this after resolving everything.
    pub fn check_unknown_keys(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .file
            .keys()
            .filter(|k| !self.resolved.contains_key(*k))
            .map(|k| k.as_str())
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(MdError::Config(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )))
        }
    }

    /// The resolved configuration, one `key = value  # source` line per
    /// lookup, sorted by key.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (key, (value, source)) in &self.resolved {
            out.push_str(&format!("{key} = {value}  # {}\n", source.as_str()));
        }
        out
    }

    /// Like [`echo`](Self::echo) but without source annotations; suitable
    /// for reuse as a config file.
    pub fn resolved_config(&self) -> String {
        let mut out = String::new();
        for (key, (value, _)) in &self.resolved {
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_spacing() {
        let text = "\n# full-line comment\nlr = 0.1  # trailing\n  epochs=30\nname = shifted-a\n";
        let map = parse_config(text).unwrap();
        assert_eq!(map.len(), 3);
        assert_eq!(map["lr"], "0.1");
        assert_eq!(map["epochs"], "30");
        assert_eq!(map["name"], "shifted-a");
    }

    #[test]
    fn value_may_contain_equals() {
        let map = parse_config("expr = a=b").unwrap();
        assert_eq!(map["expr"], "a=b");
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(parse_config("just some words").is_err());
        assert!(parse_config("= value").is_err());
        assert!(parse_config("key =   # only a comment").is_err());
        let err = parse_config("a = 1\na = 2").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
        assert!(err.is_usage());
    }

    #[test]
    fn precedence_is_flag_then_file_then_default() {
        let mut s = Settings::new();
        s.file = parse_config("lr = 0.5\nepochs = 7").unwrap();
        s.set_flag("lr", "0.9");
        assert_eq!(s.get_f64("lr", 0.1).unwrap(), 0.9);
        assert_eq!(s.get_usize("epochs", 30).unwrap(), 7);
        assert_eq!(s.get_u64("seed", 0).unwrap(), 0);

        let echo = s.echo();
        assert!(echo.contains("lr = 0.9  # flag"));
        assert!(echo.contains("epochs = 7  # file"));
        assert!(echo.contains("seed = 0  # default"));

        // The echo without sources parses back to the same values.
        let reparsed = parse_config(&s.resolved_config()).unwrap();
        assert_eq!(reparsed["lr"], "0.9");
        assert_eq!(reparsed["epochs"], "7");
    }

    #[test]
    fn bad_numbers_and_choices_are_usage_errors() {
        let mut s = Settings::new();
        s.set_flag("epochs", "many");
        let err = s.get_usize("epochs", 1).unwrap_err();
        assert!(err.is_usage());
        assert!(err.to_string().contains("epochs"), "{err}");

        let mut s = Settings::new();
        s.set_flag("precision", "half");
        let err = s
            .get_choice("precision", "single", &["single", "double"])
            .unwrap_err();
        assert!(err.to_string().contains("single|double"), "{err}");

        let mut s = Settings::new();
        s.set_flag("lr", "inf");
        assert!(s.get_f64("lr", 0.1).is_err());
    }

    #[test]
    fn unconsulted_file_keys_are_flagged() {
        let mut s = Settings::new();
        s.file = parse_config("lr = 0.5\ntypo_key = 3").unwrap();
        s.get_f64("lr", 0.1).unwrap();
        let err = s.check_unknown_keys().unwrap_err();
        assert!(err.to_string().contains("typo_key"), "{err}");

        let mut ok = Settings::new();
        ok.file = parse_config("lr = 0.5").unwrap();
        ok.get_f64("lr", 0.1).unwrap();
        ok.check_unknown_keys().unwrap();
    }
}
