//! Result files: record CSVs and run manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use glt_core::data::Normalization;
use glt_core::pruning::RunRecord;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

/// First line of every record CSV.
pub const CSV_VERSION_LINE: &str = "# glt-records v1";
pub const CSV_COLUMNS: [&str; 6] = ["round", "active_count", "compression_ratio", "train_acc", "test_acc", "residual"];

/// Renders records as CSV, header comment included. Floats use the shortest
/// representation that parses back to the same value.
pub fn records_to_csv(records: &[RunRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).expect("in-memory write");
    for r in records {
        w.write_record([
            r.round.to_string(),
            r.active_count.to_string(),
            r.compression_ratio.to_string(),
            r.train_accuracy.to_string(),
            r.test_accuracy.to_string(),
            r.sparsify_residual.to_string(),
        ])
        .expect("in-memory write");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output");
    format!("{CSV_VERSION_LINE}\n{body}")
}

/// Appends rows to a record CSV as they are produced, flushing each one.
pub struct CsvSink {
    path: PathBuf,
    file: fs::File,
}

impl CsvSink {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = fs::File::create(path).map_err(Error::io(path))?;
        let header = records_to_csv(&[]);
        file.write_all(header.as_bytes()).map_err(Error::io(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, record: &RunRecord) -> Result<()> {
        let text = records_to_csv(std::slice::from_ref(record));
        // drop the comment and column lines of the one-record rendering
        let row = text.lines().nth(2).expect("one data row");
        writeln!(self.file, "{row}").map_err(Error::io(&self.path))?;
        self.file.flush().map_err(Error::io(&self.path))
    }
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    fs::write(path, records_to_csv(records)).map_err(Error::io(path))
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    parse_records(&text, path)
}

pub fn parse_records(text: &str, path: &Path) -> Result<Vec<RunRecord>> {
    let csv_err = |row: u64, message: String| Error::Csv {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(first) if first.trim_end() == CSV_VERSION_LINE => {}
        Some(first) => return Err(csv_err(1, format!("expected `{CSV_VERSION_LINE}`, found `{first}`"))),
        None => return Err(csv_err(1, "empty file".into())),
    }
    let body = &text[text.find('\n').map_or(text.len(), |i| i + 1)..];
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
    let header = reader.headers().map_err(|e| csv_err(2, e.to_string()))?.clone();
    if header.iter().ne(CSV_COLUMNS) {
        return Err(csv_err(2, format!("expected columns {}", CSV_COLUMNS.join(","))));
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        // file line: version line, column line, then data rows
        let line = i as u64 + 3;
        let row = row.map_err(|e| csv_err(line, e.to_string()))?;
        let field = |k: usize| row.get(k).unwrap_or("").trim();
        let int = |k: usize| {
            field(k)
                .parse::<usize>()
                .map_err(|e| csv_err(line, format!("{}: `{}` ({e})", CSV_COLUMNS[k], field(k))))
        };
        let float = |k: usize| {
            field(k)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| csv_err(line, format!("{}: `{}` is not a finite number", CSV_COLUMNS[k], field(k))))
        };
        out.push(RunRecord {
            round: int(0)?,
            active_count: int(1)?,
            compression_ratio: float(2)?,
            train_accuracy: float(3)?,
            test_accuracy: float(4)?,
            sparsify_residual: float(5)?,
        });
    }
    Ok(out)
}

/// `manifest.json` of one run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub param_count: usize,
    pub dictionary_dim: usize,
    /// Per-channel standardization constants, for CIFAR-10 runs.
    pub normalization: Option<Normalization>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(Error::io(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}
