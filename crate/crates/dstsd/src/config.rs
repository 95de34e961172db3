//! Sectioned key = value configuration files plus a canonical content hash
//! recorded in experiment manifests.

use crate::{Error, Result};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

/// Parsed configuration: `[section]` headers group `key = value` lines.
/// Blank lines and `#` comments are ignored. Keys before any header land in
/// the unnamed section "".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |d: &str| Error::Config(format!("line {}: {}", i + 1, d));
            if let Some(inner) = line.strip_prefix('[') {
                let name = inner
                    .strip_suffix(']')
                    .ok_or_else(|| bad("unterminated section header"))?
                    .trim();
                if name.is_empty() {
                    return Err(bad("empty section name"));
                }
                current = name.to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad("expected key = value"))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(bad("empty key"));
            }
            sections
                .entry(current.clone())
                .or_default()
                .insert(key.to_string(), value.trim().to_string());
        }
        Ok(Config { sections })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Config::parse(&text)
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map(|v| v.as_str())
    }

    fn parsed<T: std::str::FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        match self.get(section, key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| {
                Error::Config(format!("[{section}] {key}: cannot parse '{raw}'"))
            }),
        }
    }

    pub fn f64(&self, section: &str, key: &str, default: f64) -> Result<f64> {
        self.parsed(section, key, default)
    }

    pub fn usize(&self, section: &str, key: &str, default: usize) -> Result<usize> {
        self.parsed(section, key, default)
    }

    pub fn u64(&self, section: &str, key: &str, default: u64) -> Result<u64> {
        self.parsed(section, key, default)
    }

    pub fn bool(&self, section: &str, key: &str, default: bool) -> Result<bool> {
        self.parsed(section, key, default)
    }

    pub fn string(&self, section: &str, key: &str, default: &str) -> String {
        self.get(section, key).unwrap_or(default).to_string()
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str> {
        self.get(section, key)
            .ok_or_else(|| Error::Config(format!("missing required key [{section}] {key}")))
    }

    /// Semicolon-separated list of reals.
    pub fn f64_list(&self, section: &str, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.get(section, key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(';')
                .map(|v| {
                    v.trim().parse().map_err(|_| {
                        Error::Config(format!("[{section}] {key}: cannot parse '{v}'"))
                    })
                })
                .collect(),
        }
    }

    /// Semicolon-separated list of indices.
    pub fn usize_list(&self, section: &str, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.get(section, key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(';')
                .map(|v| {
                    v.trim().parse().map_err(|_| {
                        Error::Config(format!("[{section}] {key}: cannot parse '{v}'"))
                    })
                })
                .collect(),
        }
    }

    /// SHA-256 of the canonicalized (sorted, normalized) contents, so hash
    /// equality means semantic equality regardless of formatting.
    pub fn hash_hex(&self) -> String {
        let mut hasher = Sha256::new();
        for (section, entries) in &self.sections {
            hasher.update(section.as_bytes());
            hasher.update([0u8]);
            for (k, v) in entries {
                hasher.update(k.as_bytes());
                hasher.update([1u8]);
                hasher.update(v.as_bytes());
                hasher.update([2u8]);
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_values() {
        let cfg = Config::parse(
            "top = 1\n\n# comment\n[cable]\nn_cells = 300\ndiffusion=18.0\n[monitor]\nw_max = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.get("", "top"), Some("1"));
        assert_eq!(cfg.usize("cable", "n_cells", 0).unwrap(), 300);
        assert_eq!(cfg.f64("cable", "diffusion", 0.0).unwrap(), 18.0);
        assert_eq!(cfg.usize("monitor", "w_max", 0).unwrap(), 3);
        assert_eq!(cfg.usize("monitor", "absent", 7).unwrap(), 7);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(Config::parse("[unclosed\n").is_err());
        assert!(Config::parse("no_equals_here\n").is_err());
        assert!(Config::parse("= value\n").is_err());
        assert!(matches!(
            Config::parse("x = y\n").unwrap().usize("", "x", 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn lists_and_hash() {
        let a = Config::parse("[sweep]\ndeltas = 0.15;0.25;0.35\n").unwrap();
        assert_eq!(
            a.f64_list("sweep", "deltas", &[]).unwrap(),
            vec![0.15, 0.25, 0.35]
        );

        // hash is format-insensitive but value-sensitive
        let b = Config::parse("[sweep]\n  deltas=0.15;0.25;0.35  \n# c\n").unwrap();
        assert_eq!(a.hash_hex(), b.hash_hex());
        let c = Config::parse("[sweep]\ndeltas = 0.15;0.25;0.36\n").unwrap();
        assert_ne!(a.hash_hex(), c.hash_hex());
        assert_eq!(a.hash_hex().len(), 64);
    }
}
