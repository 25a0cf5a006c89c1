//! Writes simulator metrics in the ingestion format.

use std::io::Write;

use log::warn;
use streamcap_core::metrics::write_metrics;

use crate::engine::SimResult;
use crate::error::Result;

/// Writes every metric sample of `result` as JSON lines; returns the number of lines.
pub fn emit_synthetic_metrics<W: Write>(result: &SimResult, writer: W) -> Result<usize> {
    if result.samples.is_empty() {
        warn!(
            "run of {} s produced no complete {} s window; no metrics written",
            result.duration, result.window
        );
    }
    write_metrics(writer, &result.samples)?;
    Ok(result.samples.len())
}
