//! Per-epoch run records, written as JSON lines.

use std::io::Write;
use std::path::Path;

use repq::MultCounts;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub compute: u64,
    pub stats: u64,
    pub backward: u64,
}

impl Counters {
    pub fn forward(&self) -> u64 {
        self.compute + self.stats
    }

    pub fn total(&self) -> u64 {
        self.compute + self.stats + self.backward
    }
}

impl From<MultCounts> for Counters {
    fn from(c: MultCounts) -> Self {
        Counters {
            compute: c.compute,
            stats: c.stats,
            backward: c.backward,
        }
    }
}

impl std::ops::AddAssign for Counters {
    fn add_assign(&mut self, o: Counters) {
        self.compute += o.compute;
        self.stats += o.stats;
        self.backward += o.backward;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub seed: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    pub wall_ms: u64,
    pub mults: Counters,
}

/// Append-only list of epoch records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    records: Vec<EpochRecord>,
}

impl RunMetrics {
    pub fn push(&mut self, r: EpochRecord) {
        self.records.push(r);
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    /// Best eval accuracy over the epochs of `stage`.
    pub fn best(&self, stage: &str) -> Option<f64> {
        self.records
            .iter()
            .filter(|r| r.stage == stage)
            .map(|r| r.eval_accuracy)
            .fold(None, |m, a| Some(m.map_or(a, |m: f64| m.max(a))))
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| TrainError::Data(format!("metrics line: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(RunMetrics { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| TrainError::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| TrainError::io(path, e))
    }
}

/// One row of the summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub strategy: String,
    pub bn_mode: String,
    pub bits: u32,
    pub seed: u64,
    pub metric: f64,
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| TrainError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| TrainError::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| TrainError::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| TrainError::Data(e.to_string())))
        .collect()
}
