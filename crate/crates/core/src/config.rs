//! Flat `key = value` configuration text.

use std::fmt::Display;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid config: {field}: {reason}")]
    Invalid { field: String, reason: String },
}

impl ConfigError {
    pub fn invalid(field: &str, reason: impl Into<String>) -> Self {
        ConfigError::Invalid { field: field.to_string(), reason: reason.into() }
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn render_kv(entries: &[(String, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{} = {}\n", k, v)).collect()
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue { key: key.to_string(), value: value.to_string(), reason: e.to_string() })
}

/// A section of the flat config.
pub trait KvConfig {
    /// Sets `key` if this section owns it; returns whether it did.
    fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError>;
    fn entries(&self) -> Vec<(String, String)>;
}

/// Implements [`KvConfig`] with one key per listed field, named after the field.
#[macro_export]
macro_rules! kv_config {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::config::KvConfig for $ty {
            fn set(&mut self, key: &str, value: &str) -> Result<bool, $crate::config::ConfigError> {
                match key {
                    $(stringify!($field) => { self.$field = $crate::config::parse_value(key, value)?; Ok(true) })*
                    _ => Ok(false),
                }
            }
            fn entries(&self) -> Vec<(String, String)> {
                vec![$((stringify!($field).to_string(), self.$field.to_string())),*]
            }
        }
    };
}

/// Applies every entry to the first section that owns it; unowned keys are errors.
pub fn apply_all(sections: &mut [&mut dyn KvConfig], entries: &[(String, String)]) -> Result<(), ConfigError> {
    'outer: for (k, v) in entries {
        for s in sections.iter_mut() {
            if s.set(k, v)? {
                continue 'outer;
            }
        }
        return Err(ConfigError::UnknownKey(k.clone()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Default)]
    struct Demo {
        alpha: f64,
        name: String,
        on: bool,
    }
    kv_config!(Demo { alpha, name, on });

    #[test]
    fn round_trip_and_unknown_keys() {
        let mut d = Demo::default();
        let kv = parse_kv("# comment\nalpha = 0.1 # trailing\n\nname = x\non = true\n").unwrap();
        apply_all(&mut [&mut d], &kv).unwrap();
        assert_eq!((d.alpha, d.name.as_str(), d.on), (0.1, "x", true));
        assert_eq!(parse_kv(&render_kv(&d.entries())).unwrap(), d.entries());
        assert!(matches!(apply_all(&mut [&mut d], &[("beta".into(), "1".into())]), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(apply_all(&mut [&mut d], &[("alpha".into(), "x".into())]), Err(ConfigError::BadValue { .. })));
        assert!(parse_kv("novalue").is_err());
    }
}
