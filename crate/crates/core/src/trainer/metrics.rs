//! Training metrics as JSON lines.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One optimizer step. Loss components that do not apply to the phase are
/// `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_ce: Option<f64>,
    pub loss_distill: Option<f64>,
    pub loss_contrastive: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub mean_loss: f64,
    pub top1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

impl MetricRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metric records serialize")
    }
}

pub trait MetricsSink {
    fn record(&mut self, record: &MetricRecord) -> Result<()>;
}

/// Discards everything.
#[derive(Debug, Default)]
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &MetricRecord) -> Result<()> {
        Ok(())
    }
}

/// Keeps records in memory.
#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    pub records: Vec<MetricRecord>,
}

impl MemorySink {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            MetricRecord::Step(s) => Some(s),
            MetricRecord::Epoch(_) => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            MetricRecord::Epoch(e) => Some(e),
            MetricRecord::Step(_) => None,
        })
    }

    /// Total loss of every step, in order.
    pub fn step_losses(&self) -> Vec<f64> {
        self.steps().map(|s| s.loss_total).collect()
    }
}

impl MetricsSink for MemorySink {
    fn record(&mut self, record: &MetricRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }
}

/// Appends one JSON object per line, flushed after every record.
#[derive(Debug)]
pub struct JsonlSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlSink {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }
}

impl MetricsSink for JsonlSink {
    fn record(&mut self, record: &MetricRecord) -> Result<()> {
        let path = &self.path;
        writeln!(self.out, "{}", record.to_json())
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Reads a JSON-lines metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Validation(format!("metrics line {l:?}: {e}"))))
        .collect()
}

/// Forwards records to a sink while hashing their serialized form.
pub(crate) struct MetricsLog<'a> {
    sink: &'a mut dyn MetricsSink,
    hasher: Sha256,
}

impl<'a> MetricsLog<'a> {
    pub(crate) fn new(sink: &'a mut dyn MetricsSink) -> Self {
        Self {
            sink,
            hasher: Sha256::new(),
        }
    }

    pub(crate) fn record(&mut self, record: MetricRecord) -> Result<()> {
        self.hasher.update(record.to_json().as_bytes());
        self.hasher.update(b"\n");
        self.sink.record(&record)
    }

    pub(crate) fn digest(self) -> String {
        hex::encode(self.hasher.finalize())
    }
}
