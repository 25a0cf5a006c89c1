//! `streamcap`: train models from runtime metrics, predict and allocate configurations,
//! run the simulator and keep the calibration ledger.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{ArgGroup, Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;
use serde_json::json;
use streamcap_core::allocator::{allocate, verify_allocation, AllocationPolicy, Verification};
use streamcap_core::calibrator::{
    append_record, check_drift, overprovision_factor, read_ledger, CalibrationRecord,
    DEFAULT_DRIFT_THRESHOLD, DEFAULT_DRIFT_WINDOW,
};
use streamcap_core::metrics::{align, read_metrics_file, write_metrics, DEFAULT_WINDOW};
use streamcap_core::solver::{solve_network, PredictOptions};
use streamcap_core::trainer::{train, TrainOptions};
use streamcap_core::{Configuration, LogicalDag, ModelSet};
use streamcap_sim::training::{sweep_metrics, SweepOptions};
use streamcap_sim::{
    emit_synthetic_metrics, find_max_rate, simulate, GroundTruth, SearchOptions, SimOptions,
};

const SEED_ENV: &str = "TREVOR_SEED";

#[derive(Parser)]
#[command(name = "streamcap", version, about = "Capacity planning for stream-processing topologies")]
struct Cli {
    /// More diagnostics on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit per-node models from a metrics file.
    Train(TrainArgs),
    /// Predict the maximum source rate of a configuration.
    Predict(PredictArgs),
    /// Produce a configuration that sustains a target rate.
    Allocate(AllocateArgs),
    /// Run the simulator on a configuration.
    Simulate(SimulateArgs),
    /// Update the calibration ledger and report the over-provisioning factor and drift.
    Calibrate(CalibrateArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dag: PathBuf,
    /// JSON-lines metrics, optionally gzip-compressed.
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Alignment window in seconds.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: f64,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    dag: PathBuf,
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Let shuffle-grouped edges split unevenly to favor local consumers.
    #[arg(long)]
    locality_aware_shuffle: bool,
    /// Write the linear program in text form to this file.
    #[arg(long, value_name = "PATH")]
    dump_lp: Option<PathBuf>,
}

#[derive(Args)]
struct AllocateArgs {
    #[arg(long)]
    dag: PathBuf,
    #[arg(long)]
    models: PathBuf,
    /// Target source rate in tuples per second.
    #[arg(long)]
    target: f64,
    /// Preferred container CPU; overrides the policy file.
    #[arg(long)]
    container_cpu: Option<f64>,
    /// Allocation policy JSON.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Over-provisioning factor; overrides the policy file.
    #[arg(long)]
    overprovision: Option<f64>,
    /// Also write the configuration JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("mode").required(true).args(["rate", "find_max", "sweep"])))]
struct SimulateArgs {
    #[arg(long)]
    dag: PathBuf,
    /// Ground-truth cost file.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Offered source rate in tuples per second.
    #[arg(long)]
    rate: Option<f64>,
    /// Search for the maximum stable rate.
    #[arg(long)]
    find_max: bool,
    /// Find the maximum rate, then run a staircase sweep below it (needs --emit-metrics).
    #[arg(long, requires = "emit_metrics")]
    sweep: bool,
    /// Simulated seconds per run.
    #[arg(long, default_value_t = 120.0)]
    duration: f64,
    /// RNG seed; TREVOR_SEED takes precedence.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the run's metrics as JSON lines.
    #[arg(long, value_name = "PATH")]
    emit_metrics: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// JSON-lines ledger of (config_id, predicted, measured, ts) records.
    #[arg(long)]
    ledger: PathBuf,
    /// Append a record for this configuration before reporting.
    #[arg(long, requires_all = ["predicted", "measured"])]
    config_id: Option<String>,
    #[arg(long, requires = "config_id")]
    predicted: Option<f64>,
    #[arg(long, requires = "config_id")]
    measured: Option<f64>,
    /// Record timestamp; defaults to now.
    #[arg(long)]
    ts: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_DRIFT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = DEFAULT_DRIFT_THRESHOLD)]
    threshold: f64,
}

/// Exit status 2 for bad invocations and unreadable inputs, 1 for everything else.
enum Failure {
    Usage(anyhow::Error),
    Domain(anyhow::Error),
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(anyhow!(msg.into()))
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Domain(e.into())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn read_input<'a, T, E>(
    path: &'a Path,
    what: &str,
    load: impl FnOnce(&'a Path) -> Result<T, E>,
) -> Outcome<T>
where
    E: Into<anyhow::Error>,
{
    load(path)
        .map_err(Into::into)
        .with_context(|| format!("reading {what} {}", path.display()))
        .map_err(Failure::Usage)
}

fn print_json<T: Serialize>(value: &T) -> Outcome {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    let f = File::create(path)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(Failure::Usage)?;
    Ok(BufWriter::new(f))
}

fn cmd_train(a: TrainArgs) -> Outcome {
    let dag = read_input(&a.dag, "DAG", LogicalDag::load)?;
    let parsed = read_input(&a.metrics, "metrics", read_metrics_file)?;
    if parsed.malformed > 0 {
        warn!("{} of {} metric lines malformed and skipped", parsed.malformed, parsed.lines);
    }
    let aligned = align(&parsed.samples, a.window)?;
    let outcome = train(&dag, &aligned, &TrainOptions::default())?;
    let mut w = create(&a.out)?;
    serde_json::to_writer_pretty(&mut w, &outcome.models)?;
    w.flush()?;
    let nodes: Vec<_> = outcome
        .models
        .iter()
        .map(|m| {
            json!({
                "node": m.node,
                "classification": m.classification,
                "r_squared": m.cpu.r_squared,
                "slope": m.cpu.slope,
                "intercept": m.cpu.intercept,
                "gamma": m.gamma,
            })
        })
        .collect();
    print_json(&json!({
        "models": outcome.models.len(),
        "out": a.out,
        "nodes": nodes,
        "warnings": outcome.warnings,
    }))
}

fn cmd_predict(a: PredictArgs) -> Outcome {
    let dag = read_input(&a.dag, "DAG", LogicalDag::load)?;
    let models = read_input(&a.models, "models", ModelSet::load)?;
    let config = read_input(&a.config, "configuration", Configuration::load)?;
    let opts = PredictOptions {
        locality_aware_shuffle: a.locality_aware_shuffle,
        ..PredictOptions::default()
    };
    let solved = solve_network(&dag, &config, &models, &opts)?;
    if let Some(path) = &a.dump_lp {
        let mut w = create(path)?;
        w.write_all(solved.emitted.lp.to_text().as_bytes())?;
        w.flush()?;
    }
    print_json(&solved.prediction)
}

fn cmd_allocate(a: AllocateArgs) -> Outcome {
    if !(a.target > 0.0) || !a.target.is_finite() {
        return Err(Failure::usage(format!("--target must be > 0, got {}", a.target)));
    }
    let dag = read_input(&a.dag, "DAG", LogicalDag::load)?;
    let models = read_input(&a.models, "models", ModelSet::load)?;
    let mut policy = match &a.policy {
        Some(p) => read_input(p, "policy", AllocationPolicy::load)?,
        None => AllocationPolicy::default(),
    };
    if let Some(c) = a.container_cpu {
        policy.preferred_container_cpu = Some(c);
    }
    if let Some(phi) = a.overprovision {
        policy.overprovision_factor = phi;
    }
    let alloc = allocate(&dag, &models, a.target, &policy)?;
    let verdict = verify_allocation(&dag, &models, &alloc.configuration, alloc.adjusted_target)?;
    if let Verification::Short { predicted, gap, .. } = &verdict {
        return Err(Failure::Domain(anyhow!(
            "allocation falls short: predicted {predicted:.2} tuples/s, {gap:.2} below the adjusted target"
        )));
    }
    if let Some(path) = &a.out {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &alloc.configuration)?;
        w.flush()?;
    }
    print_json(&json!({
        "target": a.target,
        "adjusted_target": alloc.adjusted_target,
        "predicted_rate": verdict.predicted(),
        "total_cpu": alloc.total_cpu,
        "containers": alloc.configuration.containers,
        "replicas": alloc.replicas,
        "templates": alloc.templates,
        "configuration": alloc.configuration,
    }))
}

fn seed(flag: Option<u64>) -> Outcome<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(_) => flag.ok_or_else(|| {
            Failure::usage(format!("simulation needs a seed: pass --seed or set {SEED_ENV}"))
        }),
    }
}

fn cmd_simulate(a: SimulateArgs) -> Outcome {
    let seed = seed(a.seed)?;
    if !(a.duration > 0.0) {
        return Err(Failure::usage("--duration must be > 0"));
    }
    let dag = read_input(&a.dag, "DAG", LogicalDag::load)?;
    let gt = read_input(&a.gt, "ground truth", GroundTruth::load)?;
    let config = read_input(&a.config, "configuration", Configuration::load)?;
    let opts = SimOptions::new(seed).with_duration(a.duration);
    info!("simulating with seed {seed}");

    if a.sweep {
        let samples = sweep_metrics(&dag, &gt, &config, &opts, &SweepOptions::default())?;
        let path = a.emit_metrics.as_deref().expect("clap enforces --emit-metrics");
        let mut w = create(path)?;
        write_metrics(&mut w, &samples)?;
        w.flush()?;
        return print_json(&json!({ "seed": seed, "samples": samples.len(), "metrics": path }));
    }
    if a.find_max {
        let max = find_max_rate(&dag, &gt, &config, &opts, &SearchOptions::default())?;
        if a.emit_metrics.is_some() {
            warn!("--emit-metrics is ignored with --find-max");
        }
        return print_json(&json!({ "seed": seed, "max_rate": max.rate, "search": max }));
    }
    let rate = a.rate.expect("clap enforces one mode");
    if !(rate >= 0.0) || !rate.is_finite() {
        return Err(Failure::usage(format!("--rate must be >= 0, got {rate}")));
    }
    let result = simulate(&dag, &gt, &config, rate, &opts)?;
    if let Some(path) = &a.emit_metrics {
        let mut w = create(path)?;
        emit_synthetic_metrics(&result, &mut w)?;
        w.flush()?;
    }
    print_json(&json!({ "seed": seed, "result": result }))
}

fn cmd_calibrate(a: CalibrateArgs) -> Outcome {
    let mut records = if a.ledger.exists() || a.config_id.is_none() {
        read_input(&a.ledger, "ledger", |p| {
            read_ledger(BufReader::new(File::open(p)?))
        })?
    } else {
        Vec::new()
    };
    if let (Some(id), Some(p), Some(m)) = (a.config_id, a.predicted, a.measured) {
        let ts = a.ts.unwrap_or_else(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0.0, |d| d.as_secs_f64())
        });
        let record = CalibrationRecord::new(id, p, m, ts).map_err(|e| Failure::Usage(e.into()))?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&a.ledger)
            .with_context(|| format!("opening {}", a.ledger.display()))
            .map_err(Failure::Usage)?;
        append_record(BufWriter::new(file), &record)?;
        records.push(record);
    }
    let phi = overprovision_factor(&records)?;
    let drift = check_drift(&records, a.window, a.threshold);
    print_json(&json!({
        "records": records.len(),
        "overprovision_factor": phi,
        "drift": drift,
    }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Allocate(a) => cmd_allocate(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Calibrate(a) => cmd_calibrate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
