use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Stage;
use crate::error::{Error, Result};
use crate::loss::LossBreakdown;

/// One row of the append-only metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub stage: String,
    pub alpha_term: f64,
    pub comp_term: f64,
    pub trimap_term: f64,
    pub total: f64,
    #[serde(rename = "val_SAD")]
    pub val_sad: Option<f64>,
}

impl LogRow {
    pub fn new(step: u64, stage: Stage, b: &LossBreakdown, val_sad: Option<f64>) -> Self {
        Self {
            step,
            stage: stage.name().into(),
            alpha_term: b.alpha_term,
            comp_term: b.comp_term,
            trimap_term: b.trimap_term,
            total: b.total,
            val_sad,
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("metrics log: {other:?}")),
    }
}

pub struct MetricsLog {
    writer: csv::Writer<std::fs::File>,
}

impl MetricsLog {
    /// Open for appending; the header is written only to a new file.
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self { writer })
    }

    pub fn append(&mut self, row: &LogRow) -> Result<()> {
        self.writer.serialize(row).map_err(csv_err)?;
        self.writer.flush()?;
        Ok(())
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    reader
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}
