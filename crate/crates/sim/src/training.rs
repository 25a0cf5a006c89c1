//! Rate sweeps that turn simulator runs into training metrics.

use serde::{Deserialize, Serialize};
use streamcap_core::metrics::{align, MetricSample};
use streamcap_core::trainer::{train, TrainOptions, TrainOutcome};
use streamcap_core::{Configuration, LogicalDag};

use crate::engine::{simulate_schedule, RateSchedule, SimOptions};
use crate::error::{Error, Result};
use crate::search::{find_max_rate, SearchOptions};
use crate::truth::GroundTruth;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub steps: usize,
    /// Seconds per step; a multiple of the metric window keeps windows single-rate.
    pub hold: f64,
    /// Lowest and highest offered rate as fractions of the measured maximum.
    pub low: f64,
    pub high: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            steps: 20,
            hold: 60.0,
            low: 0.05,
            high: 0.95,
        }
    }
}

/// Evenly spaced offered rates between `low * max_rate` and `high * max_rate`.
pub fn sweep_rates(max_rate: f64, sweep: &SweepOptions) -> Vec<f64> {
    let n = sweep.steps.max(1);
    (0..n)
        .map(|k| {
            let f = if n == 1 {
                sweep.high
            } else {
                sweep.low + (sweep.high - sweep.low) * k as f64 / (n - 1) as f64
            };
            f * max_rate
        })
        .collect()
}

/// Finds the maximum rate of `config`, then runs a staircase sweep below it.
pub fn sweep_metrics(
    dag: &LogicalDag,
    gt: &GroundTruth,
    config: &Configuration,
    sim: &SimOptions,
    sweep: &SweepOptions,
) -> Result<Vec<MetricSample>> {
    if !(sweep.low > 0.0 && sweep.low <= sweep.high) || !(sweep.hold > 0.0) {
        return Err(Error::InvalidArgument(
            "sweep needs 0 < low <= high and hold > 0".into(),
        ));
    }
    let max = find_max_rate(dag, gt, config, sim, &SearchOptions::default())?.rate;
    let rates = sweep_rates(max, sweep);
    let opts = SimOptions {
        duration: rates.len() as f64 * sweep.hold,
        ..sim.clone()
    };
    let run = simulate_schedule(dag, gt, config, &RateSchedule::staircase(&rates, sweep.hold), &opts)?;
    Ok(run.samples)
}

/// Sweeps every training layout and trains models on the pooled metrics.
///
/// Each layout gets its own stretch of epoch time so identical instance names never share
/// an aligned window.
pub fn train_from_sweeps(
    dag: &LogicalDag,
    gt: &GroundTruth,
    layouts: &[Configuration],
    sim: &SimOptions,
    sweep: &SweepOptions,
) -> Result<TrainOutcome> {
    let mut samples = Vec::new();
    for (k, config) in layouts.iter().enumerate() {
        let opts = SimOptions {
            epoch: sim.epoch + 1e6 * k as f64,
            ..sim.clone()
        };
        samples.extend(sweep_metrics(dag, gt, config, &opts, sweep)?);
    }
    let aligned = align(&samples, sim.window)?;
    Ok(train(dag, &aligned, &TrainOptions::default())?)
}
