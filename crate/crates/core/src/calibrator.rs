//! Prediction-versus-measurement bookkeeping: over-provisioning factor and drift checks.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DRIFT_WINDOW: usize = 10;
pub const DEFAULT_DRIFT_THRESHOLD: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub config_id: String,
    pub predicted: f64,
    pub measured: f64,
    pub ts: f64,
}

impl CalibrationRecord {
    pub fn new(config_id: impl Into<String>, predicted: f64, measured: f64, ts: f64) -> Result<Self> {
        let r = CalibrationRecord {
            config_id: config_id.into(),
            predicted,
            measured,
            ts,
        };
        r.check()?;
        Ok(r)
    }

    fn check(&self) -> Result<()> {
        if !(self.predicted > 0.0) || !(self.measured > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "record `{}` needs predicted > 0 and measured > 0",
                self.config_id
            )));
        }
        Ok(())
    }
}

/// Geometric mean of predicted/measured, floored at 1.
pub fn overprovision_factor(records: &[CalibrationRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no calibration records".into()));
    }
    for r in records {
        r.check()?;
    }
    let mean_log = records
        .iter()
        .map(|r| (r.predicted / r.measured).ln())
        .sum::<f64>()
        / records.len() as f64;
    Ok(mean_log.exp().max(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum DriftCheck {
    Stable { error: f64 },
    Retrain { error: f64 },
}

impl DriftCheck {
    pub fn needs_retrain(&self) -> bool {
        matches!(self, DriftCheck::Retrain { .. })
    }
}

/// Mean relative error over the trailing `window` records; retrain when it exceeds `threshold`.
pub fn check_drift(records: &[CalibrationRecord], window: usize, threshold: f64) -> DriftCheck {
    let tail = &records[records.len().saturating_sub(window.max(1))..];
    if tail.is_empty() {
        return DriftCheck::Stable { error: 0.0 };
    }
    let error = tail
        .iter()
        .map(|r| (r.predicted - r.measured).abs() / r.measured)
        .sum::<f64>()
        / tail.len() as f64;
    if error > threshold {
        DriftCheck::Retrain { error }
    } else {
        DriftCheck::Stable { error }
    }
}

/// Reads a JSON-lines ledger; blank lines are skipped.
pub fn read_ledger<R: BufRead>(reader: R) -> Result<Vec<CalibrationRecord>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: CalibrationRecord = serde_json::from_str(&line)?;
        r.check()?;
        out.push(r);
    }
    Ok(out)
}

pub fn append_record<W: Write>(mut w: W, record: &CalibrationRecord) -> Result<()> {
    serde_json::to_writer(&mut w, record)?;
    w.write_all(b"\n")?;
    Ok(())
}
