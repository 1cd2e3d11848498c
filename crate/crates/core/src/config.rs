//! `key = value` configuration files, one setting per line, `#` comments.
//! Values are typed by the target struct's serde field types.

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

/// Ordered settings; a later `set` of the same key replaces the earlier value.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Settings {
    pairs: Vec<(String, String)>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line {}: expected key = value, got `{line}`", i + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Format(format!("config line {}: empty key", i + 1)));
            }
            s.set(k, v.trim());
        }
        Ok(s)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.pairs.iter_mut().find(|(k, _)| k == key) {
            Some(p) => p.1 = value,
            None => self.pairs.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Builds `T`; missing keys take `T`'s serde defaults.
    pub fn deserialize<T: DeserializeOwned>(&self) -> Result<T> {
        let encoded =
            serde_urlencoded::to_string(&self.pairs).map_err(|e| Error::Format(format!("config: {e}")))?;
        serde_urlencoded::from_str(&encoded).map_err(|e| Error::Format(format!("config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, Deserialize, PartialEq)]
    #[serde(default, deny_unknown_fields)]
    struct Demo {
        lr: f64,
        bits: usize,
        path: String,
        flag: bool,
    }

    #[test]
    fn parses_types_comments_and_overrides() {
        let mut s = Settings::parse("# header\nlr = 1e-3\n\nbits=16 # trailing\npath = out/a+b 1.db\n").unwrap();
        s.set("bits", "64");
        let d: Demo = s.deserialize().unwrap();
        assert_eq!(
            d,
            Demo {
                lr: 1e-3,
                bits: 64,
                path: "out/a+b 1.db".into(),
                flag: false
            }
        );
        assert_eq!(s.get("lr"), Some("1e-3"));
    }

    #[test]
    fn rejects_bad_lines_and_values() {
        assert!(matches!(Settings::parse("lr 0.1"), Err(Error::Format(_))));
        assert!(Settings::parse(" = 3").is_err());
        assert!(Settings::parse("bits = many").unwrap().deserialize::<Demo>().is_err());
        assert!(Settings::parse("colour = red").unwrap().deserialize::<Demo>().is_err());
    }
}
