use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::WorkloadError;
use crate::request::{FeedbackEvent, InferenceRequest};

/// One line of a trace file. Feedback events listed on a record are
/// delivered just before that record's request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Seconds since trace start.
    pub ts: f64,
    #[serde(flatten)]
    pub request: InferenceRequest,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feedback: Vec<FeedbackEvent>,
}

pub fn write_trace(path: &Path, records: &[TraceRecord]) -> Result<(), WorkloadError> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSONL trace, skipping blank lines and rejecting timestamps that
/// go backwards.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, WorkloadError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records: Vec<TraceRecord> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| WorkloadError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if records.last().is_some_and(|prev| rec.ts < prev.ts) {
            return Err(WorkloadError::NonMonotonic { line: i + 1 });
        }
        records.push(rec);
    }
    Ok(records)
}

/// Fraction of (user, item) occurrences that are requested again within
/// `window` seconds. Occurrences later than `horizon - window` are skipped
/// because their window is not fully observed.
pub fn recurrence_fraction(records: &[TraceRecord], window: f64, horizon: f64) -> f64 {
    let mut times: HashMap<(u64, u64), Vec<f64>> = HashMap::new();
    for r in records {
        for c in &r.request.candidates {
            times.entry((r.request.user, c.item)).or_default().push(r.ts);
        }
    }
    let (mut eligible, mut repeated) = (0usize, 0usize);
    for ts in times.values() {
        for (i, &t) in ts.iter().enumerate() {
            if t > horizon - window {
                continue;
            }
            eligible += 1;
            if ts[i + 1..].iter().any(|&u| u > t && u - t < window) {
                repeated += 1;
            }
        }
    }
    if eligible == 0 {
        0.0
    } else {
        repeated as f64 / eligible as f64
    }
}
