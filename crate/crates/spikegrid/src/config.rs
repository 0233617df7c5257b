//! Structured-text configuration: `[section]` headers with `key = value`
//! lines. Command-line flags override file values.

use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Parsed configuration file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| Error::Parse {
                    offset: i as u64,
                    message: format!("unterminated section header '{line}'"),
                })?;
                current = name.trim().to_string();
                cfg.sections.entry(current.clone()).or_default();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                offset: i as u64,
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            if current.is_empty() {
                return Err(Error::Parse {
                    offset: i as u64,
                    message: "key outside any [section]".into(),
                });
            }
            cfg.sections
                .get_mut(&current)
                .expect("section exists")
                .insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (section, kv) in &self.sections {
            out.push_str(&format!("[{section}]\n"));
            for (k, v) in kv {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl ToString) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section).and_then(|s| s.get(key)).map(String::as_str)
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("[{section}] {key} = '{v}' is not a valid value"))
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_get() {
        let text = "# comment\n[bev]\ncell = 0.1875\ngrid = 320\n\n[train]\nlr = 0.001\n";
        let cfg = Config::parse(text).unwrap();
        assert_eq!(cfg.get("bev", "grid"), Some("320"));
        let lr: f64 = cfg.get_parsed("train", "lr").unwrap().unwrap();
        assert!((lr - 0.001).abs() < 1e-12);
        assert!(cfg.get("bev", "missing").is_none());
    }

    #[test]
    fn dump_parse_round_trip() {
        let mut cfg = Config::default();
        cfg.set("bev", "cell", "0.1875");
        cfg.set("bev", "grid", "320");
        cfg.set("train", "lr", "0.001");
        cfg.set("train", "seed", "7");
        let back = Config::parse(&cfg.dump()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn rejects_key_outside_section() {
        assert!(Config::parse("lr = 0.1\n").is_err());
    }

    #[test]
    fn rejects_bad_value_type() {
        let cfg = Config::parse("[train]\nlr = fast\n").unwrap();
        assert!(cfg.get_parsed::<f64>("train", "lr").is_err());
    }
}
