//! `key = value` settings files. Blank lines and lines starting with `#`
//! are ignored; flags given on the command line take precedence.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

pub const KNOWN_KEYS: &[&str] = &[
    // training
    "batch_size",
    "base_lr",
    "lr_step",
    "lr_factor",
    "max_iter",
    "momentum",
    "weight_decay",
    "val_every",
    "model",
    "init",
    // scenario
    "scenario",
    "gammas",
    "qualities",
    "patch_size",
    "crop_mode",
    "train_size",
    "val_size",
    "test_size",
    "source_dir",
    "synthetic_count",
    "source_size",
    // paths and seeds
    "seed",
    "out",
    "manifest",
    "checkpoint",
    "log",
    "sizes",
];

#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::BadFlag(format!("config line {}: expected key = value", i + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if !KNOWN_KEYS.contains(&k) {
                return Err(CliError::BadFlag(format!("config line {}: unknown key {k:?}", i + 1)));
            }
            values.insert(k.to_string(), v.to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::BadFlag(format!("config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    /// The flag if given, else the file value for `key`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::BadFlag(format!("bad value {v:?} for {key}"))),
        }
    }

    pub fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T, CliError> {
        self.pick(flag, key)?
            .ok_or_else(|| CliError::BadFlag(format!("missing --{} (or `{key}` in the config file)", key.replace('_', "-"))))
    }
}

/// Comma-separated list value.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T> {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|_| format!("bad list item {p:?}")))
            .collect::<Result<_, _>>()
            .map(List)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_precedence() {
        let s = Settings::parse("# comment\nbatch_size = 16\n\nseed=3\n").unwrap();
        assert_eq!(s.or(None, "batch_size", 120usize).unwrap(), 16);
        assert_eq!(s.or(Some(8usize), "batch_size", 120).unwrap(), 8);
        assert_eq!(s.or(None, "max_iter", 5usize).unwrap(), 5);
        assert!(s.require::<u64>(None, "manifest").is_err());
    }

    #[test]
    fn unknown_keys_and_bad_values() {
        assert!(matches!(Settings::parse("colour = red"), Err(CliError::BadFlag(_))));
        assert!(matches!(Settings::parse("no equals sign"), Err(CliError::BadFlag(_))));
        let s = Settings::parse("batch_size = many").unwrap();
        assert!(matches!(s.pick::<usize>(None, "batch_size"), Err(CliError::BadFlag(_))));
    }

    #[test]
    fn lists() {
        assert_eq!("0.6, 0.8".parse::<List<f64>>().unwrap(), List(vec![0.6, 0.8]));
        assert!("0.6,x".parse::<List<f64>>().is_err());
    }
}
