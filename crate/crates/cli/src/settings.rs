//! Layered settings: command-line flags, then a `key = value` file, then
//! built-in defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Every key a settings file may contain. Files can be shared between
/// commands, so keys a command does not read are accepted and ignored.
pub const KNOWN_KEYS: &[&str] = &[
    "resolution",
    "truncation",
    "margin",
    "normalize",
    "gamma",
    "far_weight",
    "levels",
    "init",
    "iters",
    "step_size",
    "beta1",
    "beta2",
    "batch_size",
    "holdout",
    "trainable",
    "steps",
    "beta_start",
    "beta_end",
    "hidden",
    "cond_len",
    "fine",
    "fine_iters",
    "fine_hidden",
    "seed",
    "count",
    "iso",
    "project_steps",
    "damping",
    "weld_tol",
    "points",
];

#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    /// Resolved values, recorded in manifests.
    used: BTreeMap<String, String>,
}

pub fn parse_settings(text: &str, origin: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::usage(format!(
                "{origin}:{}: expected `key = value`",
                n + 1
            )));
        };
        let key = k.trim().replace('-', "_");
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(CliError::usage(format!(
                "{origin}:{}: unknown key `{}`",
                n + 1,
                k.trim()
            )));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let file = match path {
            None => BTreeMap::new(),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
                parse_settings(&text, &p.display().to_string())?
            }
        };
        Ok(Self {
            file,
            used: BTreeMap::new(),
        })
    }

    /// Flag if given, else the file entry, else `default`.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match (flag, self.file.get(key)) {
            (Some(v), _) => v,
            (None, Some(text)) => text
                .parse()
                .map_err(|e| CliError::usage(format!("settings key `{key}`: {e}")))?,
            (None, None) => default,
        };
        self.used.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Optional value with no default.
    pub fn get_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match (flag, self.file.get(key)) {
            (Some(v), _) => Some(v),
            (None, Some(text)) => Some(
                text.parse()
                    .map_err(|e| CliError::usage(format!("settings key `{key}`: {e}")))?,
            ),
            (None, None) => None,
        };
        if let Some(v) = &value {
            self.used.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    pub fn record(&mut self, key: &str, value: impl Display) {
        self.used.insert(key.to_string(), value.to_string());
    }

    pub fn used(&self) -> &BTreeMap<String, String> {
        &self.used
    }
}
