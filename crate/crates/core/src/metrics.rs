//! Append-only metric logs: one JSON object per line plus a long-format CSV.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, DatError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_name: String,
    pub config_hash: String,
    pub stage: String,
    pub epoch: Option<usize>,
    pub metrics: BTreeMap<String, f64>,
    /// Milliseconds since the Unix epoch. Excluded from [`Self::canonical`].
    pub timestamp_ms: u64,
}

impl MetricsRecord {
    pub fn new(run_name: &str, config_hash: &str, stage: &str, epoch: Option<usize>) -> Self {
        Self {
            run_name: run_name.to_string(),
            config_hash: config_hash.to_string(),
            stage: stage.to_string(),
            epoch,
            metrics: BTreeMap::new(),
            timestamp_ms: 0,
        }
    }

    pub fn with(mut self, name: impl Into<String>, value: f64) -> Self {
        self.metrics.insert(name.into(), value);
        self
    }

    pub fn extend(mut self, values: impl IntoIterator<Item = (String, f64)>) -> Self {
        self.metrics.extend(values);
        self
    }

    /// The record with its timestamp zeroed; equal across reruns of a deterministic run.
    pub fn canonical(&self) -> Self {
        Self {
            timestamp_ms: 0,
            ..self.clone()
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Writes `metrics.jsonl` and `metrics.csv`, flushing after each record so a
/// crash loses at most the record being written.
pub struct MetricsWriter {
    jsonl: File,
    csv: File,
    jsonl_path: PathBuf,
    csv_path: PathBuf,
}

impl MetricsWriter {
    pub fn open(dir: &Path) -> Result<Self> {
        let jsonl_path = dir.join("metrics.jsonl");
        let csv_path = dir.join("metrics.csv");
        let fresh_csv = !csv_path.exists();
        let open = |p: &Path| {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(io_err(p))
        };
        let jsonl = open(&jsonl_path)?;
        let mut csv = open(&csv_path)?;
        if fresh_csv {
            writeln!(
                csv,
                "run_name,config_hash,stage,epoch,metric,value,timestamp_ms"
            )
            .map_err(io_err(&csv_path))?;
        }
        Ok(Self {
            jsonl,
            csv,
            jsonl_path,
            csv_path,
        })
    }

    /// Stamps the record with the current time and appends it.
    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let mut rec = record.clone();
        rec.timestamp_ms = now_ms();
        let line = serde_json::to_string(&rec)
            .map_err(|e| DatError::Config(format!("metrics encoding: {e}")))?;
        writeln!(self.jsonl, "{line}").map_err(io_err(&self.jsonl_path))?;
        self.jsonl.flush().map_err(io_err(&self.jsonl_path))?;
        let epoch = rec.epoch.map(|e| e.to_string()).unwrap_or_default();
        let mut rows = String::new();
        for (k, v) in &rec.metrics {
            rows.push_str(&format!(
                "{},{},{},{epoch},{k},{v},{}\n",
                rec.run_name, rec.config_hash, rec.stage, rec.timestamp_ms
            ));
        }
        self.csv
            .write_all(rows.as_bytes())
            .map_err(io_err(&self.csv_path))?;
        self.csv.flush().map_err(io_err(&self.csv_path))
    }
}

/// Reads a `metrics.jsonl`; a truncated final line (interrupted write) is ignored.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path).map_err(io_err(path))?;
    let lines: Vec<String> = BufReader::new(f)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(io_err(path))?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<MetricsRecord>(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => {
                return Err(DatError::Invalid {
                    op: "read_metrics",
                    reason: format!("{}:{}: {e}", path.display(), i + 1),
                })
            }
        }
    }
    Ok(out)
}
