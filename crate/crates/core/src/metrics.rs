//! Append-only JSONL metrics.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub flops: u64,
    pub gate_flops: u64,
    pub energy: f64,
}

/// One line of `metrics.jsonl`. Periodic fields are absent when not due.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Processed (not dropped) steps so far, including this one.
    pub step: usize,
    pub scheduled_step: usize,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub complexity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kept_mask: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub psg_predicted_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_kept_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ledger: Option<LedgerSnapshot>,
}

impl MetricsRecord {
    pub fn new(step: usize, scheduled_step: usize, lr: f64) -> Self {
        Self {
            step,
            scheduled_step,
            lr,
            train_loss: None,
            complexity: None,
            kept_mask: None,
            psg_predicted_fraction: None,
            eval_accuracy: None,
            eval_kept_ratio: None,
            ledger: None,
        }
    }
}

/// Writes each record with a single `write` call on an unbuffered file so
/// that a crash leaves only whole lines behind.
#[derive(Debug)]
pub struct MetricsWriter {
    file: File,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, rec: &MetricsRecord) -> Result<()> {
        let mut line = serde_json::to_string(rec)?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&p).unwrap();
        let mut r = MetricsRecord::new(1, 2, 0.1);
        r.kept_mask = Some("1010".into());
        w.append(&r).unwrap();
        w.append(&MetricsRecord::new(2, 3, 0.1)).unwrap();
        let back = read_metrics(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], r);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(!text.contains("eval_accuracy"));
    }
}
