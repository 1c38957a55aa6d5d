//! Append-only experiment records: a CSV table plus a JSON-lines sidecar
//! with the full configuration echo, artifact paths and null reasons.
//!
//! Numbers are written in Rust's shortest round-trip notation, so parsing a
//! field back yields the identical value.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: &str = "sigma,s,eps_train,seed,clean_acc,eps_uni,eps_adv,delta,wall_s";

/// Reason codes for empty fields.
pub mod reason {
    pub const ERM: &str = "erm_baseline";
    pub const NOT_FOUND: &str = "not_found";
    pub const NOT_REQUESTED: &str = "not_requested";
    pub const FAILED: &str = "failed";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub sigma: f32,
    pub sharedness: Option<usize>,
    pub eps_train: f32,
    pub seed: u64,
    pub clean_acc: Option<f64>,
    pub eps_uni: Option<f32>,
    pub eps_adv: Option<f32>,
    pub delta: f64,
    pub wall_s: f64,
    pub schedule: String,
    pub config_hash: String,
    /// Resolved configuration text.
    pub config: String,
    pub artifacts: Vec<String>,
    /// Field name to reason code for every empty field.
    pub nulls: BTreeMap<String, String>,
}

impl ExperimentRecord {
    pub fn validate(&self) -> Result<()> {
        let optional = [
            ("s", self.sharedness.is_none()),
            ("clean_acc", self.clean_acc.is_none()),
            ("eps_uni", self.eps_uni.is_none()),
            ("eps_adv", self.eps_adv.is_none()),
        ];
        for (field, missing) in optional {
            if missing != self.nulls.contains_key(field) {
                return Err(Error::Config(format!(
                    "record field {field} must be set or carry a null reason, not both or neither"
                )));
            }
        }
        Ok(())
    }

    fn csv_fields(&self) -> [String; 9] {
        fn opt<T: ToString>(v: Option<T>) -> String {
            v.map(|v| v.to_string()).unwrap_or_default()
        }
        [
            self.sigma.to_string(),
            opt(self.sharedness),
            self.eps_train.to_string(),
            self.seed.to_string(),
            opt(self.clean_acc),
            opt(self.eps_uni),
            opt(self.eps_adv),
            self.delta.to_string(),
            self.wall_s.to_string(),
        ]
    }
}

/// One parsed CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub sigma: f32,
    pub sharedness: Option<usize>,
    pub eps_train: f32,
    pub seed: u64,
    pub clean_acc: Option<f64>,
    pub eps_uni: Option<f32>,
    pub eps_adv: Option<f32>,
    pub delta: f64,
    pub wall_s: f64,
}

impl From<&ExperimentRecord> for CsvRow {
    fn from(r: &ExperimentRecord) -> Self {
        Self {
            sigma: r.sigma,
            sharedness: r.sharedness,
            eps_train: r.eps_train,
            seed: r.seed,
            clean_acc: r.clean_acc,
            eps_uni: r.eps_uni,
            eps_adv: r.eps_adv,
            delta: r.delta,
            wall_s: r.wall_s,
        }
    }
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("jsonl")
}

/// Append `records` to the CSV at `path` and to its sidecar, writing the
/// header first if the file is new. Both files are locked while writing.
pub fn write_records(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    for r in records {
        r.validate()?;
    }
    let mut file = OpenOptions::new()
        .create(true)
        .read(true)
        .append(true)
        .open(path)
        .map_err(Error::io(path))?;
    file.lock().map_err(Error::io(path))?;
    let fresh = file.metadata().map_err(Error::io(path))?.len() == 0;
    if !fresh {
        check_header(path)?;
    }
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    if fresh {
        out.write_record(HEADER.split(',')).expect("in-memory write");
    }
    for r in records {
        out.write_record(r.csv_fields()).expect("in-memory write");
    }
    let bytes = out.into_inner().expect("in-memory flush");
    file.write_all(&bytes).map_err(Error::io(path))?;

    let side = sidecar_path(path);
    let mut sidecar = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&side)
        .map_err(Error::io(&side))?;
    sidecar.lock().map_err(Error::io(&side))?;
    let mut lines = String::new();
    for r in records {
        lines.push_str(&serde_json::to_string(r).expect("record serializes"));
        lines.push('\n');
    }
    sidecar.write_all(lines.as_bytes()).map_err(Error::io(&side))
}

fn check_header(path: &Path) -> Result<()> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut first = String::new();
    BufReader::new(file).read_line(&mut first).map_err(Error::io(path))?;
    let found = first.trim_end_matches(['\r', '\n']);
    if found != HEADER {
        return Err(Error::HeaderMismatch {
            path: path.to_owned(),
            expected: HEADER.into(),
            found: found.into(),
        });
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<CsvRow>> {
    check_header(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| format_error(path, e))?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| format_error(path, e))?;
        rows.push(parse_row(&rec).map_err(|msg| Error::Format {
            path: path.to_owned(),
            msg,
        })?);
    }
    Ok(rows)
}

fn format_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_owned(),
        msg: e.to_string(),
    }
}

fn parse_row(rec: &csv::StringRecord) -> std::result::Result<CsvRow, String> {
    if rec.len() != 9 {
        return Err(format!("expected 9 fields, found {}", rec.len()));
    }
    fn req<T: std::str::FromStr>(s: &str, name: &str) -> std::result::Result<T, String> {
        s.parse().map_err(|_| format!("bad {name} value {s:?}"))
    }
    fn opt<T: std::str::FromStr>(s: &str, name: &str) -> std::result::Result<Option<T>, String> {
        if s.is_empty() {
            Ok(None)
        } else {
            req(s, name).map(Some)
        }
    }
    Ok(CsvRow {
        sigma: req(&rec[0], "sigma")?,
        sharedness: opt(&rec[1], "s")?,
        eps_train: req(&rec[2], "eps_train")?,
        seed: req(&rec[3], "seed")?,
        clean_acc: opt(&rec[4], "clean_acc")?,
        eps_uni: opt(&rec[5], "eps_uni")?,
        eps_adv: opt(&rec[6], "eps_adv")?,
        delta: req(&rec[7], "delta")?,
        wall_s: req(&rec[8], "wall_s")?,
    })
}

/// Every record in the sidecar of `csv`; empty when it does not exist yet.
pub fn read_sidecar(csv: &Path) -> Result<Vec<ExperimentRecord>> {
    let side = sidecar_path(csv);
    if !side.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&side).map_err(Error::io(&side))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: side.clone(),
                msg: e.to_string(),
            })
        })
        .collect()
}
