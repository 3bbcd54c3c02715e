//! Line-delimited result files: one JSON object per step, then one summary line.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{stream_accuracy, DomainAccuracy, StepRecord, StreamResult};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub steps: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub updates: usize,
    pub mean_ssl_loss: f64,
    pub domains: Vec<String>,
    pub per_domain: Vec<DomainAccuracy>,
}

#[derive(Serialize, Deserialize)]
struct SummaryLine {
    summary: ResultSummary,
}

impl ResultSummary {
    pub fn of(result: &StreamResult) -> Self {
        let (accuracy, per_domain) = stream_accuracy(result);
        Self {
            steps: result.records.len(),
            correct: result.records.iter().filter(|r| r.correct()).count(),
            accuracy,
            updates: result.updates,
            mean_ssl_loss: result.mean_ssl_loss(),
            domains: result.domains.clone(),
            per_domain,
        }
    }
}

fn json_err(path: &Path, e: serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

pub fn write_result(path: &Path, result: &StreamResult) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = Vec::new();
    for r in &result.records {
        serde_json::to_writer(&mut out, r).map_err(|e| json_err(path, e))?;
        out.push(b'\n');
    }
    let line = SummaryLine {
        summary: ResultSummary::of(result),
    };
    serde_json::to_writer(&mut out, &line).map_err(|e| json_err(path, e))?;
    out.push(b'\n');
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads the per-step records and the stored summary.
pub fn read_result(path: &Path) -> Result<(StreamResult, ResultSummary)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut summary = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if line.starts_with("{\"summary\"") {
            summary = Some(serde_json::from_str::<SummaryLine>(line).map_err(|e| json_err(path, e))?.summary);
        } else {
            records.push(serde_json::from_str::<StepRecord>(line).map_err(|e| json_err(path, e))?);
        }
    }
    let summary = summary.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        reason: "missing summary line".into(),
    })?;
    let result = StreamResult {
        records,
        domains: summary.domains.clone(),
        updates: summary.updates,
    };
    Ok((result, summary))
}
