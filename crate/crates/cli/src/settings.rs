//! `key = value` settings merged from a config file and command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::Failure;

#[derive(Clone, Debug)]
struct Entry {
    value: String,
    /// Config file line, or `None` for a flag.
    line: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, Entry>,
}

impl Settings {
    /// Parses config text. Blank lines and `#` comments are skipped; every key must be in
    /// `allowed`.
    pub fn parse(text: &str, allowed: &[&str]) -> Result<Self, Failure> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Failure::Usage(format!(
                    "line {line}: expected key = value, got `{content}`"
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            if !allowed.contains(&key) {
                return Err(Failure::Usage(format!(
                    "line {line}: unknown key `{key}` (expected one of {})",
                    allowed.join(", ")
                )));
            }
            if let Some(prev) = values.insert(
                key.to_string(),
                Entry {
                    value: value.to_string(),
                    line: Some(line),
                },
            ) {
                return Err(Failure::Usage(format!(
                    "line {line}: `{key}` already set on line {}",
                    prev.line.unwrap_or(0)
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: Option<&Path>, allowed: &[&str]) -> Result<Self, Failure> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Failure::Usage(format!("cannot read config {}: {e}", p.display()))
                })?;
                Self::parse(&text, allowed).map_err(|f| f.context(&p.display().to_string()))
            }
        }
    }

    /// A flag value overrides whatever the file said.
    pub fn set(&mut self, key: &str, value: Option<impl Display>) {
        if let Some(v) = value {
            self.values.insert(
                key.to_string(),
                Entry {
                    value: v.to_string(),
                    line: None,
                },
            );
        }
    }

    fn bad(&self, key: &str, entry: &Entry, why: impl Display) -> Failure {
        match entry.line {
            Some(line) => Failure::Usage(format!(
                "line {line}: invalid {key} `{}`: {why}",
                entry.value
            )),
            None => Failure::Usage(format!(
                "invalid --{} `{}`: {why}",
                key.replace('_', "-"),
                entry.value
            )),
        }
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, Failure>
    where
        T::Err: Display,
    {
        self.values
            .get(key)
            .map(|e| e.value.parse().map_err(|err| self.bad(key, e, err)))
            .transpose()
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, Failure>
    where
        T::Err: Display,
    {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, Failure>
    where
        T::Err: Display,
    {
        self.opt(key)?
            .ok_or_else(|| Failure::Usage(format!("missing required setting `{key}`")))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr + Clone>(&self, key: &str, default: &[T]) -> Result<Vec<T>, Failure>
    where
        T::Err: Display,
    {
        match self.values.get(key) {
            None => Ok(default.to_vec()),
            Some(e) => e
                .value
                .split(',')
                .map(|s| s.trim().parse().map_err(|err| self.bad(key, e, err)))
                .collect(),
        }
    }

    /// `true`/`false`, also accepting `1`/`0`, `yes`/`no`, `on`/`off`.
    pub fn flag(&self, key: &str, default: bool) -> Result<bool, Failure> {
        match self.values.get(key) {
            None => Ok(default),
            Some(e) => match e.value.to_ascii_lowercase().as_str() {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(self.bad(key, e, "expected true or false")),
            },
        }
    }

    /// Writes the settings back as config text.
    pub fn render(&self) -> String {
        self.values
            .iter()
            .map(|(k, e)| format!("{k} = {}\n", e.value))
            .collect()
    }
}
