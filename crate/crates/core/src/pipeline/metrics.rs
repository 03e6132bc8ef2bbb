use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,phase,loss,accuracy,lr,mask_ratio_mean,seconds,seed";

/// One CSV row. Absent values are written as empty fields.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub phase: String,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub lr: Option<f64>,
    pub mask_ratio_mean: Option<f64>,
    pub seconds: f64,
    pub seed: u64,
}

impl MetricRow {
    pub fn new(epoch: usize, phase: impl Into<String>, seed: u64) -> Self {
        Self {
            epoch,
            phase: phase.into(),
            loss: None,
            accuracy: None,
            lr: None,
            mask_ratio_mean: None,
            seconds: 0.0,
            seed,
        }
    }

    pub fn to_csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.phase,
            opt(self.loss),
            opt(self.accuracy),
            opt(self.lr),
            opt(self.mask_ratio_mean),
            self.seconds,
            self.seed
        )
    }
}

/// Per-epoch records; within a phase, epochs strictly increase.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    rows: Vec<MetricRow>,
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if let Some(prev) = self.rows.iter().rev().find(|r| r.phase == row.phase) {
            if row.epoch <= prev.epoch {
                return Err(Error::invalid(format!(
                    "metrics epoch {} after {} in phase `{}`",
                    row.epoch, prev.epoch, row.phase
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.rows.len() + 1));
        s.push_str(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.to_csv_line());
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Appends rows to a CSV file, writing the header first if the file is new or empty.
pub fn append_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let fresh = std::fs::metadata(path)
        .map(|m| m.len() == 0)
        .unwrap_or(true);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut s = String::new();
    if fresh {
        s.push_str(METRICS_HEADER);
        s.push('\n');
    }
    for r in rows {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}
