//! Metrics, timings and step traces on disk.
//!
//! Metrics schema, one row per (seed, round), in this column order:
//! `seed, method, round, new_classes, classes_seen, n_test, n_test_old,
//! n_test_new, overall_accuracy, new_accuracy, old_accuracy, epochs, steps,
//! final_train_loss, final_lambda, exemplars, epochs_to_threshold`.
//! Optional values are empty CSV fields or JSON `null`. Floats are written
//! in shortest round-trip form. Wall-clock time lives in a separate timings
//! file so that the metrics of two identical runs are byte-identical.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ccfi_core::StepDiagnostics;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::protocol::RoundMetrics;

pub const METRICS_COLUMNS: [&str; 17] = [
    "seed",
    "method",
    "round",
    "new_classes",
    "classes_seen",
    "n_test",
    "n_test_old",
    "n_test_new",
    "overall_accuracy",
    "new_accuracy",
    "old_accuracy",
    "epochs",
    "steps",
    "final_train_loss",
    "final_lambda",
    "exemplars",
    "epochs_to_threshold",
];

pub const TRACE_COLUMNS: [&str; 6] = ["step", "ce_new", "ce_exemplar", "consolidation", "penalty", "lambda"];

pub const TIMING_COLUMNS: [&str; 3] = ["seed", "round", "seconds"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricsFormat {
    Csv,
    JsonLines,
}

impl MetricsFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(Self::Csv),
            Some("jsonl") | Some("ndjson") => Ok(Self::JsonLines),
            _ => Err(HarnessError::Config(format!(
                "cannot infer a metrics format from {}",
                path.display()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seed: u64,
    pub round: usize,
    pub seconds: f64,
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T], format: MetricsFormat) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    match format {
        MetricsFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
            w.write_record(header).map_err(csv_io)?;
            for row in rows {
                w.serialize(row).map_err(csv_io)?;
            }
            w.flush()?;
        }
        MetricsFormat::JsonLines => {
            let mut w = file;
            for row in rows {
                serde_json::to_writer(&mut w, row).map_err(std::io::Error::from)?;
                writeln!(w)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn read_rows<T: DeserializeOwned>(path: &Path, header: &[&str], format: MetricsFormat) -> Result<Vec<T>> {
    let file = BufReader::new(File::open(path)?);
    match format {
        MetricsFormat::Csv => {
            let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
            let got: Vec<String> = r
                .headers()
                .map_err(|e| parse_error(1, e))?
                .iter()
                .map(String::from)
                .collect();
            if got != header {
                return Err(HarnessError::Metrics {
                    line: 1,
                    message: format!("unexpected columns {got:?}"),
                });
            }
            r.deserialize()
                .enumerate()
                .map(|(i, row)| row.map_err(|e| parse_error(i + 2, e)))
                .collect()
        }
        MetricsFormat::JsonLines => {
            let mut out = Vec::new();
            for (i, line) in file.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                out.push(serde_json::from_str(&line).map_err(|e| parse_error(i + 1, e))?);
            }
            Ok(out)
        }
    }
}

fn csv_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

fn parse_error(line: usize, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Metrics {
        line,
        message: e.to_string(),
    }
}

pub fn write_metrics(path: &Path, metrics: &[RoundMetrics], format: MetricsFormat) -> Result<()> {
    write_rows(path, &METRICS_COLUMNS, metrics, format)
}

pub fn read_metrics(path: &Path, format: MetricsFormat) -> Result<Vec<RoundMetrics>> {
    read_rows(path, &METRICS_COLUMNS, format)
}

pub fn write_trace(path: &Path, trace: &[StepDiagnostics]) -> Result<()> {
    write_rows(path, &TRACE_COLUMNS, trace, MetricsFormat::Csv)
}

pub fn read_trace(path: &Path) -> Result<Vec<StepDiagnostics>> {
    read_rows(path, &TRACE_COLUMNS, MetricsFormat::Csv)
}

pub fn write_timings(path: &Path, timings: &[Timing]) -> Result<()> {
    write_rows(path, &TIMING_COLUMNS, timings, MetricsFormat::Csv)
}

/// Writes any serializable rows as CSV with `header`; used for ablation tables.
pub fn write_table<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    write_rows(path, header, rows, MetricsFormat::Csv)
}

/// Re-encodes a metrics file, e.g. CSV to JSON-lines.
pub fn export(input: &Path, output: &Path) -> Result<usize> {
    let rows = read_metrics(input, MetricsFormat::from_path(input)?)?;
    write_metrics(output, &rows, MetricsFormat::from_path(output)?)?;
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(round: usize, old: Option<f64>) -> RoundMetrics {
        RoundMetrics {
            seed: 7,
            method: "fixed-lambda:1e2".into(),
            round,
            new_classes: "c6;c7".into(),
            classes_seen: 8,
            n_test: 40,
            n_test_old: 30,
            n_test_new: 10,
            overall_accuracy: 0.975,
            new_accuracy: 0.1 + 0.2,
            old_accuracy: old,
            epochs: 12,
            steps: 340,
            final_train_loss: 1.234_567_890_123_456_7e-7,
            final_lambda: old.map(|_| 17.0),
            exemplars: 54,
            epochs_to_threshold: old.map(|_| 3),
        }
    }

    #[test]
    fn empty_list_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics(&p, &[], MetricsFormat::Csv).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            format!("{}\n", METRICS_COLUMNS.join(","))
        );
        assert!(read_metrics(&p, MetricsFormat::Csv).unwrap().is_empty());
    }

    #[test]
    fn round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![row(0, None), row(1, Some(2.0 / 3.0))];
        for (name, format) in [("m.csv", MetricsFormat::Csv), ("m.jsonl", MetricsFormat::JsonLines)] {
            let p = dir.path().join(name);
            write_metrics(&p, &rows, format).unwrap();
            assert_eq!(read_metrics(&p, format).unwrap(), rows);
        }
        assert_eq!(
            export(&dir.path().join("m.csv"), &dir.path().join("x.jsonl")).unwrap(),
            2
        );
        assert_eq!(
            std::fs::read(dir.path().join("x.jsonl")).unwrap(),
            std::fs::read(dir.path().join("m.jsonl")).unwrap()
        );
    }

    #[test]
    fn columns_match_schema() {
        let value = serde_json::to_value(row(1, Some(1.0))).unwrap();
        let keys: Vec<&str> = value.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expected = METRICS_COLUMNS.to_vec();
        let mut got = keys.clone();
        expected.sort_unstable();
        got.sort_unstable();
        assert_eq!(got, expected);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics(&p, &[row(1, Some(1.0))], MetricsFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let fields = text.lines().nth(1).unwrap().split(',').count();
        assert_eq!(fields, METRICS_COLUMNS.len());

        std::fs::write(&p, "seed,round\n1,2\n").unwrap();
        assert!(matches!(
            read_metrics(&p, MetricsFormat::Csv),
            Err(HarnessError::Metrics { line: 1, .. })
        ));
    }

    #[test]
    fn trace_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let trace = vec![
            StepDiagnostics {
                step: 0,
                ce_new: 3.5,
                ce_exemplar: 0.25,
                consolidation: 0.0,
                penalty: 0.0,
                lambda: 1.0,
            },
            StepDiagnostics {
                step: 1,
                ce_new: 1e-300,
                ce_exemplar: 2.0,
                consolidation: 1e-17,
                penalty: 5e-17,
                lambda: 10.0,
            },
        ];
        write_trace(&p, &trace).unwrap();
        assert_eq!(read_trace(&p).unwrap(), trace);
    }
}
