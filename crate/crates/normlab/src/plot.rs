//! CSV plot data. Floats are written in shortest round-trip form, so parsing
//! a file gives back bit-identical values.

use std::fs::File;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{NormlabError, Result};

/// One evaluation of a training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub train_nll: f64,
    pub test_nll: f64,
    pub test_error_rate: f64,
    pub wall_time_seconds: f64,
}

/// Appends rows to a CSV file, flushing after each one so an aborted run
/// leaves every completed row on disk.
pub struct RowWriter<R> {
    path: PathBuf,
    inner: csv::Writer<File>,
    _row: PhantomData<R>,
}

fn csv_error(path: &Path, e: csv::Error) -> NormlabError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => NormlabError::output(path, io),
        other => NormlabError::output(path, std::io::Error::other(format!("{other:?}"))),
    }
}

impl<R: Serialize> RowWriter<R> {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| NormlabError::output(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            inner: csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file),
            _row: PhantomData,
        })
    }

    pub fn write(&mut self, row: &R) -> Result<()> {
        self.inner.serialize(row).map_err(|e| csv_error(&self.path, e))?;
        self.inner.flush().map_err(|e| NormlabError::output(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Writes `rows` with a header line. An empty slice is rejected because it
/// would leave no header either.
pub fn write_rows<R: Serialize>(rows: &[R], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(NormlabError::Config(format!("no rows to write to {}", path.display())));
    }
    let mut w = RowWriter::create(path)?;
    rows.iter().try_for_each(|r| w.write(r))
}

pub fn read_rows<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let parse = |reason: String| NormlabError::Parse {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse(e.to_string()))?;
    reader.deserialize().map(|r| r.map_err(|e| parse(e.to_string()))).collect()
}

pub fn check_metric_rows(rows: &[MetricRow]) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        if !(0.0..=1.0).contains(&r.test_error_rate) {
            return Err(NormlabError::Config(format!("row {i}: error rate {} outside [0, 1]", r.test_error_rate)));
        }
        if i > 0 && r.epoch <= rows[i - 1].epoch {
            return Err(NormlabError::Config(format!("row {i}: epoch {} does not increase", r.epoch)));
        }
    }
    Ok(())
}

/// Writes training metrics as plot data.
pub fn emit_plotdata(rows: &[MetricRow], path: &Path) -> Result<()> {
    check_metric_rows(rows)?;
    write_rows(rows, path)
}

pub fn parse_plotdata(path: &Path) -> Result<Vec<MetricRow>> {
    read_rows(path)
}
