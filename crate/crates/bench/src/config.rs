//! Experiment ids and plain-text `key=value` configuration.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown experiment `{0}` (try `mindkit bench list`)")]
    UnknownExperiment(String),
    #[error("line {line}: expected `key=value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("override `{key}`: cannot parse `{value}` as {kind}")]
    BadValue { key: String, value: String, kind: &'static str },
    #[error("unused override(s): {0}")]
    Unused(String),
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    StimuliSurvey,
    HillTube,
    HillPixel,
    StaticWalls,
    StaticPixel,
    RotatingBar,
    TranslatingBar,
    Pairs,
    Strains,
    Repair,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 10] = [
        ExperimentId::StimuliSurvey,
        ExperimentId::HillTube,
        ExperimentId::HillPixel,
        ExperimentId::StaticWalls,
        ExperimentId::StaticPixel,
        ExperimentId::RotatingBar,
        ExperimentId::TranslatingBar,
        ExperimentId::Pairs,
        ExperimentId::Strains,
        ExperimentId::Repair,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::StimuliSurvey => "stimuli-survey",
            ExperimentId::HillTube => "hill-tube",
            ExperimentId::HillPixel => "hill-pixel",
            ExperimentId::StaticWalls => "static-walls",
            ExperimentId::StaticPixel => "static-pixel",
            ExperimentId::RotatingBar => "rotating-bar",
            ExperimentId::TranslatingBar => "translating-bar",
            ExperimentId::Pairs => "pairs",
            ExperimentId::Strains => "strains",
            ExperimentId::Repair => "repair",
        }
    }

    /// The results topic each experiment reproduces.
    pub fn anchor(self) -> &'static str {
        match self {
            ExperimentId::StimuliSurvey => "resting baseline drift and the fourteen-stimulus response survey",
            ExperimentId::HillTube => "tube intensity-response calibration",
            ExperimentId::HillPixel => "pixel intensity-response calibration",
            ExperimentId::StaticWalls => "static wall illumination: identity, count and duration decoding",
            ExperimentId::StaticPixel => "static pixel illumination: quadrant and transition decoding",
            ExperimentId::RotatingBar => "rotating-bar phase tracking",
            ExperimentId::TranslatingBar => "translating-bar position tracking",
            ExperimentId::Pairs => "co-occurring stimuli and partial superposition",
            ExperimentId::Strains => "multi-strain Hill calibration",
            ExperimentId::Repair => "self-repair recovery kinetics",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentId {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ExperimentId::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| ConfigError::UnknownExperiment(s.to_string()))
    }
}

/// Parse `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
        }
        if out.insert(key.to_string(), v.trim().to_string()).is_some() {
            return Err(ConfigError::Duplicate { line: i + 1, key: key.to_string() });
        }
    }
    Ok(out)
}

pub fn read_key_values(path: &Path) -> Result<BTreeMap<String, String>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_key_values(&text)
}

/// Typed access to overrides that remembers which keys were read.
#[derive(Debug, Default)]
pub struct Overrides {
    values: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl Overrides {
    pub fn new(values: BTreeMap<String, String>) -> Self {
        Self { values, used: RefCell::default() }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.values.get(key).map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, key: &str, default: T, kind: &'static str) -> Result<T, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.to_string(),
                kind,
            }),
        }
    }

    pub fn f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        self.parsed(key, default, "a number")
    }

    pub fn usize(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        self.parsed(key, default, "a non-negative integer")
    }

    pub fn bool(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some("1" | "true" | "yes") => Ok(true),
            Some("0" | "false" | "no") => Ok(false),
            Some(v) => Err(ConfigError::BadValue {
                key: key.to_string(),
                value: v.to_string(),
                kind: "a boolean",
            }),
        }
    }

    pub fn string(&self, key: &str, default: &str) -> String {
        self.raw(key).unwrap_or(default).to_string()
    }

    /// Comma-separated list of numbers.
    pub fn f64_list(&self, key: &str, default: &[f64]) -> Result<Vec<f64>, ConfigError> {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| ConfigError::BadValue {
                        key: key.to_string(),
                        value: v.to_string(),
                        kind: "a list of numbers",
                    })
                })
                .collect(),
        }
    }

    /// Fail if any supplied key was never read.
    pub fn ensure_consumed(&self) -> Result<(), ConfigError> {
        let used = self.used.borrow();
        let unused: Vec<&str> = self
            .values
            .keys()
            .filter(|k| !used.contains(*k))
            .map(String::as_str)
            .collect();
        if unused.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Unused(unused.join(", ")))
        }
    }

    pub fn as_map(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub experiment: ExperimentId,
    pub seed: u64,
    pub overrides: BTreeMap<String, String>,
}

impl BenchConfig {
    pub fn new(experiment: ExperimentId, seed: u64) -> Self {
        Self { experiment, seed, overrides: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.overrides.insert(key.to_string(), value.to_string());
        self
    }

    /// Build from parsed `key=value` pairs; `experiment` and `seed` may
    /// appear in the file and are removed from the overrides.
    pub fn from_map(mut map: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let experiment = map
            .remove("experiment")
            .ok_or_else(|| ConfigError::Missing("experiment".into()))?
            .parse()?;
        let seed_text = map.remove("seed").ok_or_else(|| ConfigError::Missing("seed".into()))?;
        let seed = seed_text.parse().map_err(|_| ConfigError::BadValue {
            key: "seed".into(),
            value: seed_text.clone(),
            kind: "a non-negative integer",
        })?;
        Ok(Self { experiment, seed, overrides: map })
    }
}
