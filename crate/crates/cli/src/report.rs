//! Run reports and on-disk artifacts.
//!
//! Every subcommand ends by writing `report.json` into the output directory
//! and echoing the same JSON to stdout. The report schema is stable
//! (`schema_version`), field order is deterministic, and — by construction —
//! every metric in `results` is recomputed from the artifacts the run just
//! wrote, never copied from in-memory state. Seeded runs therefore produce
//! byte-identical reports up to the `timings_ms` block.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde_json::{json, Map, Value};

use jule_core::dataset::Dataset;
use jule_core::metrics::{accuracy, nmi};
use jule_core::{Error, Result};

use crate::AppError;

/// Version of the report JSON layout.
pub const SCHEMA_VERSION: u32 = 1;

/// Accumulates the pieces of a report while a command runs.
pub struct ReportBuilder {
    command: &'static str,
    out_dir: PathBuf,
    config: Value,
    dataset: Value,
    results: Value,
    artifacts: BTreeMap<String, String>,
    timings: BTreeMap<String, f64>,
}

impl ReportBuilder {
    /// Starts a report for `command`, creating the output directory.
    pub fn new(command: &'static str, out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir)?;
        Ok(Self {
            command,
            out_dir: out_dir.to_path_buf(),
            config: Value::Null,
            dataset: Value::Null,
            results: Value::Null,
            artifacts: BTreeMap::new(),
            timings: BTreeMap::new(),
        })
    }

    /// Echoes the resolved configuration.
    pub fn config(&mut self, config: Value) {
        self.config = config;
    }

    /// Summarizes the dataset a run is about to consume.
    pub fn dataset(&mut self, ds: &Dataset) {
        self.dataset = json!({
            "name": ds.name,
            "n_samples": ds.n_samples(),
            "n_features": ds.n_features(),
            "has_labels": ds.labels.is_some(),
        });
    }

    /// Sets the command-specific results block.
    pub fn results(&mut self, results: Value) {
        self.results = results;
    }

    /// Resolves an artifact path inside the output directory and records it
    /// under `name`.
    pub fn artifact(&mut self, name: &str, file_name: &str) -> PathBuf {
        let path = self.out_dir.join(file_name);
        self.artifacts
            .insert(name.to_string(), path.to_string_lossy().into_owned());
        path
    }

    /// Runs `f`, recording its wall-clock milliseconds under `phase`.
    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let value = f()?;
        self.timings
            .insert(phase.to_string(), start.elapsed().as_secs_f64() * 1e3);
        Ok(value)
    }

    /// Assembles the report, writes `report.json`, and prints it to stdout.
    pub fn finish(mut self) -> Result<Value> {
        let report_path = self.artifact("report", "report.json");
        let mut top = Map::new();
        top.insert("schema_version".into(), json!(SCHEMA_VERSION));
        top.insert("command".into(), json!(self.command));
        top.insert("config".into(), self.config);
        top.insert("dataset".into(), self.dataset);
        top.insert("results".into(), self.results);
        top.insert("artifacts".into(), json!(self.artifacts));
        top.insert("timings_ms".into(), json!(self.timings));
        let report = Value::Object(top);

        let text = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Format(format!("report serialization failed: {e}")))?;
        fs::write(&report_path, format!("{text}\n"))?;
        println!("{text}");
        Ok(report)
    }
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

/// Writes a cluster assignment as `sample,cluster` rows with a header.
pub fn write_assignment_csv(path: &Path, assignment: &[u32]) -> Result<()> {
    let mut out = String::with_capacity(16 + 8 * assignment.len());
    out.push_str("sample,cluster\n");
    for (i, c) in assignment.iter().enumerate() {
        out.push_str(&format!("{i},{c}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads an assignment written by [`write_assignment_csv`], checking that
/// sample indices run `0..n` in order.
pub fn read_assignment_csv(path: &Path) -> Result<Vec<u32>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("sample,cluster") => {}
        other => {
            return Err(Error::Format(format!(
                "assignment file {} has header {other:?}, expected \"sample,cluster\"",
                path.display()
            )))
        }
    }
    let mut assignment = Vec::new();
    for (row, line) in lines.enumerate() {
        let (s, c) = line.split_once(',').ok_or_else(|| {
            Error::Format(format!(
                "assignment row {row} is not sample,cluster: {line:?}"
            ))
        })?;
        let sample: usize = s
            .parse()
            .map_err(|_| Error::Format(format!("bad sample index {s:?} on row {row}")))?;
        if sample != row {
            return Err(Error::Format(format!(
                "assignment rows out of order: row {row} holds sample {sample}"
            )));
        }
        let cluster: u32 = c
            .parse()
            .map_err(|_| Error::Format(format!("bad cluster id {c:?} on row {row}")))?;
        assignment.push(cluster);
    }
    Ok(assignment)
}

/// Writes a feature matrix as headerless CSV rows, one sample per line,
/// with round-trip-exact float formatting.
pub fn write_features_csv(path: &Path, features: &Array2<f64>) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    for row in features.rows() {
        let mut first = true;
        for v in row.iter() {
            if !first {
                out.write_all(b",")?;
            }
            first = false;
            write!(out, "{v}")?;
        }
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Re-reads an assignment artifact and scores it against ground truth.
/// Returns `(None, None)` when the dataset has no labels.
pub fn scores_from_artifact(
    path: &Path,
    labels: Option<&Vec<u32>>,
) -> Result<(Option<f64>, Option<f64>)> {
    let Some(truth) = labels else {
        return Ok((None, None));
    };
    let pred = read_assignment_csv(path)?;
    Ok((Some(nmi(&pred, truth)?), Some(accuracy(&pred, truth)?)))
}

/// Loads a single-assignment artifact for the `eval` subcommand, accepting
/// either the `sample,cluster` artifact format or a bare one-label-per-line
/// file.
pub fn read_labels_flexible(path: &Path) -> std::result::Result<Vec<u32>, AppError> {
    if let Ok(assignment) = read_assignment_csv(path) {
        return Ok(assignment);
    }
    let text = fs::read_to_string(path).map_err(Error::from)?;
    let mut labels = Vec::new();
    for (row, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: u32 = line.parse().map_err(|_| {
            Error::Format(format!(
                "label file {}: row {row} is not an integer: {line:?}",
                path.display()
            ))
        })?;
        labels.push(v);
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignment_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("assignment.csv");
        let labels = vec![0u32, 2, 1, 2, 0];
        write_assignment_csv(&path, &labels).unwrap();
        assert_eq!(read_assignment_csv(&path).unwrap(), labels);
    }

    #[test]
    fn assignment_rejects_disorder() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("assignment.csv");
        fs::write(&path, "sample,cluster\n1,0\n0,1\n").unwrap();
        assert!(read_assignment_csv(&path).is_err());
        fs::write(&path, "cluster\n0\n").unwrap();
        assert!(read_assignment_csv(&path).is_err());
    }

    #[test]
    fn features_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.csv");
        let x = ndarray::array![[0.1, -1.5e-7], [2.0 / 3.0, 1e300]];
        write_features_csv(&path, &x).unwrap();
        let ds = jule_core::dataset::load_csv(&path, None, false).unwrap();
        assert_eq!(ds.features, x);
    }

    #[test]
    fn flexible_labels_accept_bare_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.txt");
        fs::write(&path, "3\n1\n4\n").unwrap();
        assert_eq!(read_labels_flexible(&path).unwrap(), vec![3, 1, 4]);
    }
}
