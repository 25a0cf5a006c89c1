//! Fitting node models from aligned runtime samples.

use std::collections::BTreeMap;

use log::warn;

use crate::dag::{LogicalDag, STREAM_MANAGER};
use crate::error::{Error, Result};
use crate::metrics::AlignedSample;
use crate::model::{Classification, ModelSet, NodeModel};
use crate::regression::{fit_linear, fit_through_origin, LinearModel, MIN_POINTS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// caputil above which a node counts as saturated.
    pub caputil_saturated: f64,
    /// Fraction of max_cpu below which a saturated node counts as I/O bound.
    pub cputil_fraction: f64,
    /// gctime fraction of a window considered high.
    pub gctime_high: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            caputil_saturated: 0.90,
            cputil_fraction: 0.80,
            gctime_high: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeClass {
    pub classification: Classification,
    pub saturation_rate: Option<f64>,
    /// Samples usable for fitting (backpressured windows removed).
    pub usable: Vec<AlignedSample>,
}

/// Applies the decision rows in order: backpressure, I/O saturation, GC pressure, CPU.
pub fn classify_node(
    samples: &[AlignedSample],
    max_cpu: f64,
    thresholds: &Thresholds,
) -> Result<NodeClass> {
    if samples.len() < MIN_POINTS {
        return Err(Error::too_few(MIN_POINTS, samples.len(), "classify"));
    }
    let bp_rates: Vec<f64> = samples
        .iter()
        .filter(|s| s.backpressure > 0.0)
        .map(|s| s.tuple_rate_in)
        .collect();
    if !bp_rates.is_empty() {
        let saturation = bp_rates.iter().copied().fold(f64::INFINITY, f64::min);
        return Ok(NodeClass {
            classification: Classification::Miscalibrated,
            saturation_rate: Some(saturation),
            usable: samples
                .iter()
                .filter(|s| s.backpressure <= 0.0)
                .cloned()
                .collect(),
        });
    }
    let max_cap = samples
        .iter()
        .filter_map(|s| s.caputil)
        .fold(f64::NEG_INFINITY, f64::max);
    let max_cpu_seen = samples.iter().map(|s| s.cputil).fold(0.0, f64::max);
    let max_gc = samples.iter().map(|s| s.gctime).fold(0.0, f64::max);
    let saturated = max_cap > thresholds.caputil_saturated;
    let cpu_line = thresholds.cputil_fraction * max_cpu;
    let classification = if saturated && max_cpu_seen < cpu_line {
        Classification::IoBound
    } else if saturated && max_gc > thresholds.gctime_high {
        Classification::MemoryBound
    } else {
        Classification::CpuBound
    };
    Ok(NodeClass {
        classification,
        saturation_rate: None,
        usable: samples.to_vec(),
    })
}

/// Zero-intercept least-squares ratio of output to input rate.
pub fn estimate_gamma(samples: &[(f64, f64)]) -> Result<f64> {
    if samples.len() < MIN_POINTS {
        return Err(Error::too_few(MIN_POINTS, samples.len(), "gamma"));
    }
    if samples.iter().all(|s| s.0 == 0.0) {
        return Err(Error::Degenerate("all input rates are zero".into()));
    }
    Ok(fit_through_origin(samples)?.max(0.0))
}

/// Rewrites the CPU model of an I/O-bound node so that it saturates where the capacity
/// model reaches 1.0. Other classifications pass through unchanged.
pub fn normalize_io_model(model: &NodeModel) -> Result<NodeModel> {
    if model.classification != Classification::IoBound {
        return Ok(model.clone());
    }
    let cap = model.capacity.ok_or_else(|| {
        Error::Degenerate(format!("io-bound node `{}` has no capacity model", model.node))
    })?;
    if !(cap.slope > 0.0) {
        return Err(Error::Degenerate(format!(
            "capacity slope of `{}` is not positive",
            model.node
        )));
    }
    let r_star = (1.0 - cap.intercept) / cap.slope;
    if !(r_star > 0.0) {
        return Err(Error::Degenerate(format!(
            "capacity model of `{}` is saturated at zero rate",
            model.node
        )));
    }
    let mut out = model.clone();
    out.cpu.slope = (model.max_cpu - model.cpu.intercept) / r_star;
    out.normalized = true;
    out.measured_cpu = Some(model.measured_cpu.unwrap_or(model.cpu));
    Ok(out)
}

/// Keeps the (rate, memory) samples of windows that directly follow a window with GC activity.
///
/// `mem_series[i]` is the (input rate, memutil) of window `i` and `gctime_series[i]` its GC
/// fraction; both must be in time order for one instance.
pub fn filter_gc_troughs(mem_series: &[(f64, f64)], gctime_series: &[f64]) -> Vec<(f64, f64)> {
    let out = gc_troughs(mem_series, gctime_series);
    if out.is_empty() {
        warn!("no GC events observed; memory model omitted");
    }
    out
}

fn gc_troughs(mem_series: &[(f64, f64)], gctime_series: &[f64]) -> Vec<(f64, f64)> {
    let n = mem_series.len().min(gctime_series.len());
    (1..n)
        .filter(|&i| gctime_series[i - 1] > 0.0)
        .map(|i| mem_series[i])
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub thresholds: Thresholds,
    /// CPU budget of a stream manager.
    pub sm_max_cpu: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            thresholds: Thresholds::default(),
            sm_max_cpu: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub models: ModelSet,
    pub warnings: Vec<String>,
}

/// Trains one model per DAG node plus the stream manager.
pub fn train(
    dag: &LogicalDag,
    samples: &[AlignedSample],
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    let mut by_node: BTreeMap<&str, Vec<&AlignedSample>> = BTreeMap::new();
    for s in samples {
        by_node.entry(s.node.as_str()).or_default().push(s);
    }
    let mut names: Vec<(&str, f64)> = dag
        .nodes
        .iter()
        .map(|n| (n.name.as_str(), n.max_cpu))
        .collect();
    names.push((STREAM_MANAGER, options.sm_max_cpu));

    let mut models = ModelSet::new();
    let mut warnings = Vec::new();
    for (name, max_cpu) in names {
        let rows: Vec<AlignedSample> = by_node
            .get(name)
            .map(|v| v.iter().map(|s| (*s).clone()).collect())
            .unwrap_or_default();
        let (model, mut w) = train_node(name, max_cpu, &rows, options)?;
        warnings.append(&mut w);
        models.insert(model);
    }
    for w in &warnings {
        warn!("{w}");
    }
    Ok(TrainOutcome { models, warnings })
}

fn train_node(
    name: &str,
    max_cpu: f64,
    rows: &[AlignedSample],
    options: &TrainOptions,
) -> Result<(NodeModel, Vec<String>)> {
    let mut warnings = Vec::new();
    let class = classify_node(rows, max_cpu, &options.thresholds)
        .map_err(|e| with_node(e, name))?;
    if class.classification == Classification::MemoryBound {
        return Err(Error::MemoryBound {
            node: name.to_string(),
        });
    }
    let usable = &class.usable;
    if usable.len() < MIN_POINTS {
        return Err(Error::too_few(
            MIN_POINTS,
            usable.len(),
            format!("usable samples for `{name}`"),
        ));
    }
    let cpu_pts: Vec<_> = usable.iter().map(|s| (s.tuple_rate_in, s.cputil)).collect();
    let cpu = fit_linear(&cpu_pts).map_err(|e| with_node(e, name))?;

    let capacity = if usable.iter().all(|s| s.caputil.is_some()) {
        let pts: Vec<_> = usable
            .iter()
            .map(|s| (s.tuple_rate_in, s.caputil.unwrap_or(0.0)))
            .collect();
        fit_linear(&pts).ok()
    } else {
        None
    };

    let gamma = if name == STREAM_MANAGER {
        1.0
    } else {
        let pts: Vec<_> = usable
            .iter()
            .map(|s| (s.tuple_rate_in, s.tuple_rate_out))
            .collect();
        estimate_gamma(&pts).map_err(|e| with_node(e, name))?
    };

    let memory = fit_memory(name, rows, &mut warnings);

    let model = NodeModel {
        node: name.to_string(),
        cpu,
        capacity,
        gamma,
        memory,
        classification: class.classification,
        saturation_rate: class.saturation_rate,
        normalized: false,
        measured_cpu: None,
        max_cpu,
    };
    Ok((normalize_io_model(&model)?, warnings))
}

fn fit_memory(name: &str, rows: &[AlignedSample], warnings: &mut Vec<String>) -> Option<LinearModel> {
    let mut per_instance: BTreeMap<&str, Vec<&AlignedSample>> = BTreeMap::new();
    for s in rows {
        per_instance.entry(&s.instance).or_default().push(s);
    }
    let mut troughs = Vec::new();
    for series in per_instance.values_mut() {
        series.sort_by(|a, b| a.window_start.total_cmp(&b.window_start));
        let mem: Vec<(f64, f64)> = series
            .iter()
            .map(|s| (s.tuple_rate_in, s.memutil.unwrap_or(f64::NAN)))
            .collect();
        let gc: Vec<f64> = series.iter().map(|s| s.gctime).collect();
        troughs.extend(gc_troughs(&mem, &gc).into_iter().filter(|p| !p.1.is_nan()));
    }
    if troughs.is_empty() {
        warnings.push(format!("`{name}`: no GC events observed; memory model omitted"));
        return None;
    }
    match fit_linear(&troughs) {
        Ok(m) => Some(m),
        Err(e) => {
            warnings.push(format!("`{name}`: memory model omitted ({e})"));
            None
        }
    }
}

fn with_node(e: Error, name: &str) -> Error {
    match e {
        Error::TooFewSamples { needed, got, .. } => {
            Error::too_few(needed, got, format!("node `{name}`"))
        }
        Error::Degenerate(msg) => Error::Degenerate(format!("node `{name}`: {msg}")),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DriftVerdict {
    Stable { error: f64 },
    Drifted { error: f64 },
}

impl DriftVerdict {
    pub fn error(&self) -> f64 {
        match *self {
            DriftVerdict::Stable { error } | DriftVerdict::Drifted { error } => error,
        }
    }

    pub fn is_drifted(&self) -> bool {
        matches!(self, DriftVerdict::Drifted { .. })
    }
}

pub const DEFAULT_DRIFT_THRESHOLD: f64 = 0.15;

/// Mean relative error of modeled against observed cputil, relative to the modeled value.
pub fn detect_drift(
    model: &NodeModel,
    fresh: &[AlignedSample],
    threshold: f64,
) -> Result<DriftVerdict> {
    if fresh.len() < MIN_POINTS {
        return Err(Error::too_few(MIN_POINTS, fresh.len(), "drift check"));
    }
    let error = fresh
        .iter()
        .map(|s| {
            let pred = model.cpu_at(s.tuple_rate_in);
            (s.cputil - pred).abs() / pred.abs().max(1e-9)
        })
        .sum::<f64>()
        / fresh.len() as f64;
    Ok(if error > threshold {
        DriftVerdict::Drifted { error }
    } else {
        DriftVerdict::Stable { error }
    })
}
