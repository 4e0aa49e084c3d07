//! Flat, line-oriented configuration files: `[section]` headers over
//! `key = value` pairs, `#` comments, later assignments winning. The parsed
//! map keeps insertion order so a config can be echoed back canonically.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    sections: Vec<(String, Vec<(String, String)>)>,
}

fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

impl ConfigMap {
    pub fn new() -> Self {
        ConfigMap::default()
    }

    /// Parse config text. Syntax errors carry the byte offset of the
    /// offending line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = ConfigMap::new();
        let mut section: Option<String> = None;
        let mut offset = 0usize;
        for line in text.split('\n') {
            let line_offset = offset;
            offset += line.len() + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if let Some(stripped) = trimmed.strip_prefix('[') {
                let name = stripped.strip_suffix(']').ok_or(Error::Parse {
                    offset: line_offset,
                    msg: "unterminated section header".into(),
                })?;
                let name = name.trim();
                if !valid_name(name) {
                    return Err(Error::Parse {
                        offset: line_offset,
                        msg: format!("invalid section name {name:?}"),
                    });
                }
                section = Some(name.to_string());
                if !map.sections.iter().any(|(s, _)| s == name) {
                    map.sections.push((name.to_string(), Vec::new()));
                }
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or(Error::Parse {
                offset: line_offset,
                msg: format!("expected key = value, got {trimmed:?}"),
            })?;
            let key = key.trim();
            if !valid_name(key) {
                return Err(Error::Parse {
                    offset: line_offset,
                    msg: format!("invalid key {key:?}"),
                });
            }
            let section = section.clone().ok_or(Error::Parse {
                offset: line_offset,
                msg: "key outside of any [section]".into(),
            })?;
            map.put(&section, key, value.trim());
        }
        Ok(map)
    }

    pub fn sections(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(s, _)| s.as_str())
    }

    pub fn keys<'a>(&'a self, section: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.sections
            .iter()
            .filter(move |(s, _)| s == section)
            .flat_map(|(_, kv)| kv.iter().map(|(k, _)| k.as_str()))
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|(s, _)| s == section)?
            .1
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Insert or replace a value.
    pub fn put(&mut self, section: &str, key: &str, value: &str) {
        let entry = match self.sections.iter_mut().find(|(s, _)| s == section) {
            Some((_, kv)) => kv,
            None => {
                self.sections.push((section.to_string(), Vec::new()));
                &mut self.sections.last_mut().unwrap().1
            }
        };
        match entry.iter_mut().find(|(k, _)| k == key) {
            Some((_, v)) => *v = value.to_string(),
            None => entry.push((key.to_string(), value.to_string())),
        }
    }

    /// Apply a `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec.split_once('=').ok_or_else(|| {
            Error::Config(format!("override {spec:?} is not of the form section.key=value"))
        })?;
        let (section, key) = path.trim().split_once('.').ok_or_else(|| {
            Error::Config(format!("override key {path:?} is not of the form section.key"))
        })?;
        if !valid_name(section.trim()) || !valid_name(key.trim()) {
            return Err(Error::Config(format!("invalid override key {path:?}")));
        }
        self.put(section.trim(), key.trim(), value.trim());
        Ok(())
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str> {
        self.get(section, key).ok_or_else(|| {
            Error::Config(format!("missing required key {section}.{key}"))
        })
    }

    pub fn get_f64(&self, section: &str, key: &str) -> Result<Option<f64>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v.parse::<f64>().map(Some).map_err(|_| {
                Error::Config(format!("{section}.{key} is not a number: {v:?}"))
            }),
        }
    }

    pub fn get_usize(&self, section: &str, key: &str) -> Result<Option<usize>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v.parse::<usize>().map(Some).map_err(|_| {
                Error::Config(format!("{section}.{key} is not a non-negative integer: {v:?}"))
            }),
        }
    }

    pub fn get_u64(&self, section: &str, key: &str) -> Result<Option<u64>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v.parse::<u64>().map(Some).map_err(|_| {
                Error::Config(format!("{section}.{key} is not a non-negative integer: {v:?}"))
            }),
        }
    }

    pub fn get_bool(&self, section: &str, key: &str) -> Result<Option<bool>> {
        match self.get(section, key) {
            None => Ok(None),
            Some("true") | Some("1") | Some("yes") => Ok(Some(true)),
            Some("false") | Some("0") | Some("no") => Ok(Some(false)),
            Some(v) => Err(Error::Config(format!("{section}.{key} is not a boolean: {v:?}"))),
        }
    }

    pub fn require_f64(&self, section: &str, key: &str) -> Result<f64> {
        self.require(section, key)?;
        Ok(self.get_f64(section, key)?.unwrap())
    }

    pub fn require_usize(&self, section: &str, key: &str) -> Result<usize> {
        self.require(section, key)?;
        Ok(self.get_usize(section, key)?.unwrap())
    }

    /// Canonical echo: sections and keys in insertion order, normalized
    /// whitespace.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, (section, kv)) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!("[{section}]\n"));
            for (k, v) in kv {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    /// Reject keys outside the allowed set, catching typos and stale
    /// overrides. `allowed` maps section name to its permitted keys.
    pub fn check_schema(&self, allowed: &[(&str, &[&str])]) -> Result<()> {
        for (section, kv) in &self.sections {
            let entry = allowed.iter().find(|(s, _)| s == section).ok_or_else(|| {
                Error::Config(format!("unknown section [{section}]"))
            })?;
            for (k, _) in kv {
                if !entry.1.contains(&k.as_str()) {
                    return Err(Error::Config(format!(
                        "unknown key {k:?} in section [{section}]"
                    )));
                }
            }
        }
        Ok(())
    }
}
