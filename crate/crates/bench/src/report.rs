//! Summary JSON, pass/fail checks and on-disk bundles.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mindkit_core::{save_session, Session, SessionError};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::config::ExperimentId;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One acceptance check against a tolerance band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub pass: bool,
}

impl Check {
    pub fn within(name: &str, value: f64, lower: f64, upper: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            lower: Some(lower),
            upper: Some(upper),
            pass: value >= lower && value <= upper,
        }
    }

    pub fn near(name: &str, value: f64, target: f64, tol: f64) -> Self {
        Self::within(name, value, target - tol, target + tol)
    }

    pub fn at_least(name: &str, value: f64, lower: f64) -> Self {
        Self { name: name.to_string(), value, lower: Some(lower), upper: None, pass: value >= lower }
    }

    pub fn at_most(name: &str, value: f64, upper: f64) -> Self {
        Self { name: name.to_string(), value, lower: None, upper: Some(upper), pass: value <= upper }
    }

    /// Strictly greater than `bound`.
    pub fn above(name: &str, value: f64, bound: f64) -> Self {
        Self { name: name.to_string(), value, lower: Some(bound), upper: None, pass: value > bound }
    }

    pub fn flag(name: &str, ok: bool) -> Self {
        Self {
            name: name.to_string(),
            value: f64::from(u8::from(ok)),
            lower: Some(1.0),
            upper: None,
            pass: ok,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: ExperimentId,
    pub seed: u64,
    pub overrides: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
    /// Structured results such as confusion matrices and per-condition tables.
    pub tables: BTreeMap<String, Value>,
    pub checks: Vec<Check>,
    pub pass: bool,
}

impl Summary {
    pub fn new(experiment: ExperimentId, seed: u64, overrides: BTreeMap<String, String>) -> Self {
        Self {
            experiment,
            seed,
            overrides,
            metrics: BTreeMap::new(),
            tables: BTreeMap::new(),
            checks: Vec::new(),
            pass: true,
        }
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn table<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), ReportError> {
        self.tables.insert(name.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn check(&mut self, check: Check) {
        self.pass &= check.pass;
        self.checks.push(check);
    }

    pub fn to_json(&self) -> Result<String, ReportError> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// A CSV file of plot data.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

impl Artifact {
    pub fn csv(name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Self {
        let mut contents = header.join(",");
        contents.push('\n');
        for row in rows {
            contents.push_str(&row.join(","));
            contents.push('\n');
        }
        Self { name: name.to_string(), contents }
    }
}

#[derive(Debug, Clone)]
pub struct BenchOutput {
    pub summary: Summary,
    pub artifacts: Vec<Artifact>,
    pub sessions: Vec<(String, Session)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub command: String,
    pub seed: Option<u64>,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        Self {
            tool: format!("mindkit {}", env!("CARGO_PKG_VERSION")),
            command: command.to_string(),
            seed,
            files: Vec::new(),
        }
    }

    /// Record a file written under `root`.
    pub fn add(&mut self, root: &Path, path: &Path) -> Result<(), ReportError> {
        let bytes = fs::metadata(path).map_err(|source| ReportError::Io { path: path.to_path_buf(), source })?.len();
        let rel = path.strip_prefix(root).unwrap_or(path);
        self.files.push(ManifestEntry { path: rel.to_string_lossy().replace('\\', "/"), bytes });
        Ok(())
    }

    pub fn write(&mut self, root: &Path) -> Result<PathBuf, ReportError> {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        let path = root.join("manifest.json");
        write_text(&path, &(serde_json::to_string_pretty(self)? + "\n"))?;
        Ok(path)
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<(), ReportError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| ReportError::Io { path: parent.to_path_buf(), source })?;
    }
    fs::write(path, text).map_err(|source| ReportError::Io { path: path.to_path_buf(), source })
}

/// Write the bundle under `out/<experiment>/` and return the manifest path.
pub fn write_bundle(output: &BenchOutput, out: &Path) -> Result<PathBuf, ReportError> {
    let root = out.join(output.summary.experiment.name());
    fs::create_dir_all(&root).map_err(|source| ReportError::Io { path: root.clone(), source })?;
    let mut manifest = Manifest::new(&format!("bench {}", output.summary.experiment), Some(output.summary.seed));
    let summary = root.join("summary.json");
    write_text(&summary, &output.summary.to_json()?)?;
    manifest.add(&root, &summary)?;
    for a in &output.artifacts {
        let p = root.join(&a.name);
        write_text(&p, &a.contents)?;
        manifest.add(&root, &p)?;
    }
    for (name, session) in &output.sessions {
        let dir = root.join("sessions");
        fs::create_dir_all(&dir).map_err(|source| ReportError::Io { path: dir.clone(), source })?;
        let paths = save_session(session, &dir.join(format!("{name}.csv")))?;
        for p in [paths.trace_csv, paths.events_json, paths.meta_json] {
            manifest.add(&root, &p)?;
        }
    }
    manifest.write(&root)
}

/// Format a float for CSV with enough digits to round-trip.
pub fn num(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_bands() {
        assert!(Check::near("a", 0.75, 0.732, 0.1).pass);
        assert!(!Check::near("a", 0.84, 0.732, 0.1).pass);
        assert!(!Check::above("c", 0.25, 0.25).pass);
        assert!(!Check::at_least("n", f64::NAN, 0.0).pass);
        let mut s = Summary::new(ExperimentId::Pairs, 1, BTreeMap::new());
        s.check(Check::flag("ok", true));
        assert!(s.pass);
        s.check(Check::at_most("mae", 31.0, 30.0));
        assert!(!s.pass);
    }

    #[test]
    fn bundle_on_disk() {
        let mut s = Summary::new(ExperimentId::HillTube, 7, BTreeMap::new());
        s.metric("x", 1.5);
        let out = BenchOutput {
            summary: s,
            artifacts: vec![Artifact::csv("curve.csv", &["a", "b"], [vec![num(1.0), num(2.5)]])],
            sessions: Vec::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_bundle(&out, dir.path()).unwrap();
        let m: Manifest = serde_json::from_str(&fs::read_to_string(manifest).unwrap()).unwrap();
        let names: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(names, ["curve.csv", "summary.json"]);
        let csv = fs::read_to_string(dir.path().join("hill-tube/curve.csv")).unwrap();
        assert_eq!(csv, "a,b\n1,2.5\n");
    }
}
