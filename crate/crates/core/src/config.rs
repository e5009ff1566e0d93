//! Flat `key=value` config files. Blank lines and `#` comments are ignored;
//! unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues(BTreeMap<String, String>);

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let key = k.trim().to_string();
            if map.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
        }
        Ok(Self(map))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.0.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

/// Overwrites `slot` when `key` is present.
pub fn set<T: FromStr>(kv: &KeyValues, key: &str, slot: &mut T) -> Result<()>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = kv.get(key) {
        *slot = v
            .parse()
            .map_err(|e| Error::Config(format!("{key}: cannot parse `{v}`: {e}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects() {
        let kv = KeyValues::parse("# c\nsteps = 10\n\nlr=0.5\n").unwrap();
        assert_eq!(kv.get("steps"), Some("10"));
        let mut steps = 0usize;
        set(&kv, "steps", &mut steps).unwrap();
        assert_eq!(steps, 10);
        assert!(kv.check_keys(&["steps"]).is_err());
        assert!(KeyValues::parse("a=1\na=2").is_err());
        assert!(KeyValues::parse("novalue").is_err());
        let mut bad = 0usize;
        assert!(set(&KeyValues::parse("x=abc").unwrap(), "x", &mut bad).is_err());
    }
}
