//! Time-stepped simulation of instances and stream managers sharing container CPUs.
//!
//! Each scheduler quantum every container splits its free cores max-min fairly over the
//! CPU demand of its servers (instances and the stream manager), every server works through
//! its queue with the granted budget, and the outputs become visible on the next quantum.
//! Tuples are routed one by one: instance -> local SM -> (local instance | remote SM -> instance).

use std::collections::{BTreeMap, VecDeque};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};
use streamcap_core::metrics::{MetricKind, MetricSample};
use streamcap_core::{Configuration, Grouping, LogicalDag, STREAM_MANAGER};

use crate::error::{Error, Result};
use crate::truth::GroundTruth;

/// Number of distinct synthetic keys used by fields grouping.
pub const KEY_SPACE: u32 = 10_007;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub seed: u64,
    /// Simulated seconds.
    pub duration: f64,
    /// Metric window in seconds.
    pub window: f64,
    /// Scheduler quantum in seconds.
    pub tick: f64,
    /// Queued tuples above which a server raises backpressure.
    pub high_watermark: f64,
    /// Queued tuples below which it clears again.
    pub low_watermark: f64,
    pub queue_cap: u64,
    /// Cores a stream manager may use.
    pub sm_cpu_cap: f64,
    /// Epoch seconds of simulated time zero.
    pub epoch: f64,
    /// Standard deviation of additive noise on reported cputil, in cores.
    pub cpu_noise: f64,
    /// Exponentially distributed per-tuple costs instead of fixed ones.
    pub jitter: bool,
}

impl SimOptions {
    pub fn new(seed: u64) -> Self {
        SimOptions {
            seed,
            duration: 120.0,
            window: 10.0,
            tick: 0.01,
            high_watermark: 1000.0,
            low_watermark: 500.0,
            queue_cap: 1_000_000,
            sm_cpu_cap: 1.0,
            epoch: 1_700_000_000.0,
            cpu_noise: 0.0,
            jitter: false,
        }
    }

    pub fn with_duration(mut self, duration: f64) -> Self {
        self.duration = duration;
        self
    }

    fn validate(&self) -> Result<()> {
        let pos = |what: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{what} must be > 0, got {v}")))
            }
        };
        pos("duration", self.duration)?;
        pos("window", self.window)?;
        pos("tick", self.tick)?;
        pos("high_watermark", self.high_watermark)?;
        pos("sm_cpu_cap", self.sm_cpu_cap)?;
        if !(self.low_watermark >= 0.0 && self.low_watermark <= self.high_watermark) {
            return Err(Error::InvalidArgument(
                "low_watermark must lie in [0, high_watermark]".into(),
            ));
        }
        if self.tick > self.window || self.tick > 1.0 {
            return Err(Error::InvalidArgument("tick must not exceed the window or 1 s".into()));
        }
        if !(self.cpu_noise >= 0.0) {
            return Err(Error::InvalidArgument("cpu_noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// Piecewise-constant offered source rate over simulated time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSchedule {
    /// (start time, rate) pairs sorted by start time; the first starts at 0.
    pub steps: Vec<(f64, f64)>,
}

impl RateSchedule {
    pub fn constant(rate: f64) -> Self {
        RateSchedule {
            steps: vec![(0.0, rate)],
        }
    }

    /// Holds each rate for `hold` seconds in turn.
    pub fn staircase(rates: &[f64], hold: f64) -> Self {
        RateSchedule {
            steps: rates
                .iter()
                .enumerate()
                .map(|(i, &r)| (i as f64 * hold, r))
                .collect(),
        }
    }

    pub fn rate_at(&self, t: f64) -> f64 {
        let k = self.steps.partition_point(|s| s.0 <= t);
        self.steps[k.saturating_sub(1)].1
    }

    /// Time-averaged rate over [from, to).
    pub fn mean_rate(&self, from: f64, to: f64) -> f64 {
        if to <= from {
            return self.rate_at(from);
        }
        let mut total = 0.0;
        for (i, &(start, rate)) in self.steps.iter().enumerate() {
            let end = self.steps.get(i + 1).map_or(f64::INFINITY, |s| s.0);
            let lo = start.max(from);
            let hi = end.min(to);
            if hi > lo {
                total += rate * (hi - lo);
            }
        }
        total / (to - from)
    }

    fn validate(&self) -> Result<()> {
        if self.steps.is_empty() || self.steps[0].0 != 0.0 {
            return Err(Error::InvalidArgument("rate schedule must start at t = 0".into()));
        }
        if self.steps.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidArgument("rate schedule times must increase".into()));
        }
        if self.steps.iter().any(|s| !(s.1 >= 0.0 && s.1.is_finite())) {
            return Err(Error::InvalidArgument("offered rates must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimCounters {
    /// External tuples taken in by source instances.
    pub source_tuples: u64,
    pub instance_processed: BTreeMap<String, u64>,
    pub node_processed: BTreeMap<String, u64>,
    /// Logical outputs per node (an all-grouping copy counts once).
    pub node_emitted: BTreeMap<String, u64>,
    /// Tuples put on each edge, all-grouping copies included.
    pub edge_tuples: BTreeMap<String, u64>,
    /// Tuples handled per stream manager.
    pub sm_handled: Vec<u64>,
    /// Handled tuples that came from a local instance.
    pub sm_ingested: u64,
    /// Handled tuples that came from a remote stream manager.
    pub sm_received: u64,
    /// Tuples forwarded to another container.
    pub crossings: u64,
    /// Crossing tuples not yet handled by the receiving stream manager at the end of the run.
    pub crossings_in_flight: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    /// Mean offered rate over the measurement half.
    pub offered_rate: f64,
    /// Source intake over the measurement half.
    pub achieved_rate: f64,
    pub stable: bool,
    /// Trend of total queued tuples over the measurement half, tuples/s.
    pub queue_slope: f64,
    pub duration: f64,
    pub window: f64,
    /// Seconds during which sources were paused by backpressure.
    pub backpressure_time: f64,
    pub counters: SimCounters,
    #[serde(skip)]
    pub samples: Vec<MetricSample>,
}

/// Queue trend above which a run counts as unstable, in tuples/s.
pub const UNSTABLE_SLOPE: f64 = 1.0;

#[derive(Debug, Clone, Copy)]
struct Item {
    dest: u32,
    edge: u16,
    remote: bool,
    cost: f64,
}

struct EdgeRt {
    key: String,
    grouping: Grouping,
    weight: f64,
    bytes: f64,
    consumers: Vec<u32>,
}

#[derive(Default)]
struct WindowStats {
    processed: u64,
    emitted: u64,
    cpu: f64,
    busy: f64,
    bp: f64,
    gc: f64,
}

struct Inst {
    label: String,
    node: usize,
    container: u32,
    source_share: f64,
    cost: f64,
    base: f64,
    io: f64,
    max_cpu: f64,
    gamma: f64,
    out_edges: Vec<usize>,
    queue: u64,
    incoming: u64,
    backlog: f64,
    budget: f64,
    wall: f64,
    out_credit: f64,
    edge_credit: Vec<f64>,
    flagged: bool,
    garbage: f64,
    mem_gauge: f64,
    processed: u64,
    emitted: u64,
    win: WindowStats,
}

struct Sm {
    queue: VecDeque<Item>,
    incoming: Vec<Item>,
    outbox: VecDeque<Item>,
    queued_work: f64,
    incoming_work: f64,
    budget: f64,
    forward_cost: f64,
    flagged: bool,
    handled: u64,
    link_budget: f64,
    win: WindowStats,
}

struct Engine<'a> {
    dag: &'a LogicalDag,
    gt: &'a GroundTruth,
    opts: &'a SimOptions,
    rng: ChaCha8Rng,
    edges: Vec<EdgeRt>,
    insts: Vec<Inst>,
    sms: Vec<Sm>,
    container_insts: Vec<Vec<usize>>,
    container_cpu: Vec<f64>,
    container_link: Vec<Option<f64>>,
    counters: SimCounters,
    edge_tuples: Vec<u64>,
    paused: bool,
    bp_time: f64,
    noise: Option<Normal<f64>>,
}

/// Simulates a constant offered rate.
pub fn simulate(
    dag: &LogicalDag,
    gt: &GroundTruth,
    config: &Configuration,
    offered_rate: f64,
    opts: &SimOptions,
) -> Result<SimResult> {
    simulate_schedule(dag, gt, config, &RateSchedule::constant(offered_rate), opts)
}

pub fn simulate_schedule(
    dag: &LogicalDag,
    gt: &GroundTruth,
    config: &Configuration,
    schedule: &RateSchedule,
    opts: &SimOptions,
) -> Result<SimResult> {
    opts.validate()?;
    schedule.validate()?;
    gt.validate(dag)?;
    config.validate(dag)?;
    if opts.duration < 60.0 {
        warn!(
            "simulating only {} s; the stability verdict needs at least 60 s",
            opts.duration
        );
    }
    let mut engine = Engine::new(dag, gt, config, opts)?;
    Ok(engine.run(schedule))
}

impl<'a> Engine<'a> {
    fn new(
        dag: &'a LogicalDag,
        gt: &'a GroundTruth,
        config: &Configuration,
        opts: &'a SimOptions,
    ) -> Result<Self> {
        let placed = config.instances(dag)?;
        let m = config.containers as usize;
        let mut node_insts: Vec<Vec<u32>> = vec![Vec::new(); dag.nodes.len()];
        let mut insts = Vec::with_capacity(placed.len());
        let mut container_insts = vec![Vec::new(); m];
        for (idx, (id, c)) in placed.iter().enumerate() {
            let ni = dag.node_index(&id.node).expect("validated configuration");
            let node = &dag.nodes[ni];
            let truth = gt.node(&id.node)?;
            let p = config.parallelism[&id.node] as f64;
            node_insts[ni].push(idx as u32);
            container_insts[*c as usize].push(idx);
            let out_edges: Vec<usize> = dag
                .edges
                .iter()
                .enumerate()
                .filter(|(_, e)| e.src == id.node)
                .map(|(k, _)| k)
                .collect();
            insts.push(Inst {
                label: id.to_string(),
                node: ni,
                container: *c,
                source_share: dag.source_share(&id.node) / p,
                cost: truth.cpu_cost,
                base: truth.base_cpu,
                io: truth.io_wait,
                max_cpu: node.max_cpu,
                gamma: truth.gamma,
                edge_credit: vec![0.0; out_edges.len()],
                out_edges,
                queue: 0,
                incoming: 0,
                backlog: 0.0,
                budget: 0.0,
                wall: 0.0,
                out_credit: 0.0,
                flagged: false,
                garbage: 0.0,
                mem_gauge: truth.mem_base,
                processed: 0,
                emitted: 0,
                win: WindowStats::default(),
            });
        }
        if dag.edges.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument("too many edges".into()));
        }
        let edges: Vec<EdgeRt> = dag
            .edges
            .iter()
            .map(|e| EdgeRt {
                key: e.key(),
                grouping: e.grouping,
                weight: e.weight,
                bytes: e.bytes_per_tuple,
                consumers: node_insts[dag.node_index(&e.dst).expect("validated dag")].clone(),
            })
            .collect();

        let sm_truth = &gt.stream_manager;
        let mut sms = Vec::with_capacity(m);
        for (c, members) in container_insts.iter().enumerate() {
            let mut peers = vec![false; m];
            for &i in members {
                for &e in &insts[i].out_edges {
                    for &q in &edges[e].consumers {
                        peers[insts[q as usize].container as usize] = true;
                    }
                }
            }
            peers[c] = false;
            let peers = peers.iter().filter(|&&p| p).count() as u32;
            sms.push(Sm {
                queue: VecDeque::new(),
                incoming: Vec::new(),
                outbox: VecDeque::new(),
                queued_work: 0.0,
                incoming_work: 0.0,
                budget: 0.0,
                forward_cost: sm_truth.forward_cost(peers),
                flagged: false,
                handled: 0,
                link_budget: 0.0,
                win: WindowStats::default(),
            });
        }
        let noise = if opts.cpu_noise > 0.0 {
            Some(Normal::new(0.0, opts.cpu_noise).map_err(|e| Error::InvalidArgument(e.to_string()))?)
        } else {
            None
        };
        let mut counters = SimCounters {
            sm_handled: vec![0; m],
            ..Default::default()
        };
        for n in &dag.nodes {
            counters.node_processed.insert(n.name.clone(), 0);
            counters.node_emitted.insert(n.name.clone(), 0);
        }
        Ok(Engine {
            dag,
            gt,
            opts,
            rng: ChaCha8Rng::seed_from_u64(opts.seed),
            edges,
            insts,
            sms,
            container_insts,
            container_cpu: (0..m as u32).map(|c| config.dims(c).cpu).collect(),
            container_link: (0..m as u32).map(|c| config.dims(c).link).collect(),
            counters,
            edge_tuples: vec![0; dag.edges.len()],
            paused: false,
            bp_time: 0.0,
            noise,
        })
    }

    fn run(&mut self, schedule: &RateSchedule) -> SimResult {
        let dt = self.opts.tick;
        let steps = (self.opts.duration / dt).round() as u64;
        let per_window = ((self.opts.window / dt).round() as u64).max(1);
        let per_second = ((1.0 / dt).round() as u64).max(1);
        let half = steps / 2;
        let mut samples = Vec::new();
        let mut trend: Vec<(f64, f64)> = Vec::new();
        let mut source_at_half = 0u64;
        let mut cursor = 0.0;
        let mut offered_accum = 0.0;
        for step in 0..steps {
            let t = step as f64 * dt;
            if step == half {
                source_at_half = self.counters.source_tuples;
            }
            let rate = schedule.rate_at(t);
            self.tick(rate, dt);
            if step >= half {
                offered_accum += rate * dt;
            }
            let done = step + 1;
            if done % per_second == 0 && done > half {
                trend.push((done as f64 * dt, self.queued_total()));
            }
            if done % per_window == 0 {
                self.close_window(cursor, &mut samples);
                cursor = done as f64 * dt;
            }
        }
        self.finish_counters();
        let measured = (steps - half) as f64 * dt;
        let achieved = if measured > 0.0 {
            (self.counters.source_tuples - source_at_half) as f64 / measured
        } else {
            0.0
        };
        let queue_slope = ols_slope(&trend);
        SimResult {
            offered_rate: if measured > 0.0 { offered_accum / measured } else { 0.0 },
            achieved_rate: achieved,
            stable: queue_slope <= UNSTABLE_SLOPE,
            queue_slope,
            duration: steps as f64 * dt,
            window: self.opts.window,
            backpressure_time: self.bp_time,
            counters: std::mem::take(&mut self.counters),
            samples,
        }
    }

    fn queued_total(&self) -> f64 {
        let inst: f64 = self
            .insts
            .iter()
            .map(|i| i.queue as f64 + i.incoming as f64 + i.backlog.floor())
            .sum();
        let sm: usize = self
            .sms
            .iter()
            .map(|s| s.queue.len() + s.incoming.len() + s.outbox.len())
            .sum();
        inst + sm as f64
    }

    fn tick(&mut self, rate: f64, dt: f64) {
        for inst in &mut self.insts {
            if inst.source_share > 0.0 {
                inst.backlog += rate * inst.source_share * dt;
            }
        }
        for c in 0..self.sms.len() {
            let grants = self.allocate_cpu(c, dt);
            let members = std::mem::take(&mut self.container_insts[c]);
            for (k, &i) in members.iter().enumerate() {
                self.run_instance(i, grants[k], dt);
            }
            self.container_insts[c] = members;
            self.run_sm(c, *grants.last().expect("sm grant"), dt);
        }
        self.transfer(dt);
        for inst in &mut self.insts {
            inst.queue += std::mem::take(&mut inst.incoming);
        }
        for sm in &mut self.sms {
            let incoming = std::mem::take(&mut sm.incoming);
            sm.queue.extend(incoming);
            sm.queued_work += std::mem::take(&mut sm.incoming_work);
        }
        self.update_backpressure(dt);
    }

    /// Cores granted to each instance of container `c` (in member order) and, last, its SM.
    fn allocate_cpu(&self, c: usize, dt: f64) -> Vec<f64> {
        let members = &self.container_insts[c];
        let sm_truth = &self.gt.stream_manager;
        let mut demand = Vec::with_capacity(members.len() + 1);
        let mut base = sm_truth.base;
        for &i in members {
            let inst = &self.insts[i];
            base += inst.base;
            let avail = self.available(inst) as f64;
            let per_wall = inst.cost / inst.max_cpu + inst.io;
            let by_wall = if per_wall > 0.0 {
                ((inst.wall + dt) / per_wall).floor()
            } else {
                f64::INFINITY
            };
            let work = (avail.min(by_wall) * inst.cost - inst.budget).max(0.0);
            demand.push((work / dt).min((inst.max_cpu - inst.base).max(0.0)));
        }
        let sm = &self.sms[c];
        let sm_work = (sm.queued_work - sm.budget).max(0.0);
        demand.push((sm_work / dt).min((self.opts.sm_cpu_cap - sm_truth.base).max(0.0)));

        let mut free = self.container_cpu[c] - base;
        if self.gt.context_switch_penalty > 0.0 {
            let runnable = demand.iter().filter(|&&d| d > 0.0).count() as f64;
            let cores = self.container_cpu[c].floor();
            free -= self.gt.context_switch_penalty * (runnable - cores).max(0.0);
        }
        water_fill(&demand, free.max(0.0))
    }

    fn available(&self, inst: &Inst) -> u64 {
        if inst.source_share > 0.0 {
            if self.paused {
                0
            } else {
                inst.backlog.floor() as u64
            }
        } else {
            inst.queue
        }
    }

    fn run_instance(&mut self, i: usize, grant: f64, dt: f64) {
        let avail = self.available(&self.insts[i]);
        let jitter = self.opts.jitter;
        let inst = &mut self.insts[i];
        inst.budget += grant * dt;
        inst.wall += dt;
        let mut n = 0u64;
        let mut cpu = 0.0;
        let mut busy = 0.0;
        while n < avail {
            let scale = if jitter {
                Exp1.sample(&mut self.rng)
            } else {
                1.0
            };
            let cost = inst.cost * scale;
            let wall = cost / inst.max_cpu + inst.io * scale;
            if inst.budget + 1e-12 < cost || inst.wall + 1e-12 < wall {
                break;
            }
            inst.budget -= cost;
            inst.wall -= wall;
            cpu += cost;
            busy += wall;
            n += 1;
        }
        let source = inst.source_share > 0.0;
        if source {
            inst.backlog -= n as f64;
        } else {
            inst.queue -= n;
        }
        if n == avail {
            inst.budget = 0.0;
            inst.wall = 0.0;
        } else {
            inst.wall = inst.wall.min(dt);
        }
        inst.processed += n;
        inst.win.processed += n;
        inst.win.cpu += cpu + inst.base * dt;
        inst.win.busy += busy;
        if let Some(gc) = &self.gt.gc {
            inst.garbage += n as f64 * gc.garbage_per_tuple;
        }
        if source {
            self.counters.source_tuples += n;
        }
        for _ in 0..n {
            self.emit(i);
        }
    }

    fn emit(&mut self, i: usize) {
        let inst = &mut self.insts[i];
        inst.out_credit += inst.gamma;
        while inst.out_credit >= 1.0 - 1e-9 {
            inst.out_credit -= 1.0;
            inst.win.emitted += 1;
            inst.emitted += 1;
        }
        let from = inst.container;
        for k in 0..inst.out_edges.len() {
            let inst = &mut self.insts[i];
            let e = inst.out_edges[k];
            inst.edge_credit[k] += inst.gamma * self.edges[e].weight;
            while self.insts[i].edge_credit[k] >= 1.0 - 1e-9 {
                self.insts[i].edge_credit[k] -= 1.0;
                self.route(from, e);
            }
        }
    }

    fn route(&mut self, from: u32, e: usize) {
        let edge = &self.edges[e];
        let p = edge.consumers.len() as u32;
        let dests: &[u32] = match edge.grouping {
            Grouping::Fields => {
                let k = self.rng.random_range(0..KEY_SPACE) % p;
                std::slice::from_ref(&edge.consumers[k as usize])
            }
            Grouping::Shuffle => {
                let k = self.rng.random_range(0..p);
                std::slice::from_ref(&edge.consumers[k as usize])
            }
            Grouping::All => &edge.consumers,
        };
        let route_cost = self.gt.stream_manager.cpu_cost_route;
        let sm = &mut self.sms[from as usize];
        for &dest in dests {
            let cost = if self.insts[dest as usize].container == from {
                route_cost
            } else {
                sm.forward_cost
            };
            sm.incoming.push(Item {
                dest,
                edge: e as u16,
                remote: false,
                cost,
            });
            sm.incoming_work += cost;
        }
        self.edge_tuples[e] += dests.len() as u64;
    }

    fn run_sm(&mut self, c: usize, grant: f64, dt: f64) {
        let cap = self.opts.queue_cap;
        let route_cost = self.gt.stream_manager.cpu_cost_route;
        let limited_link = self.container_link.iter().any(Option::is_some);
        let mut forwards = Vec::new();
        let sm = &mut self.sms[c];
        sm.budget += grant * dt;
        let mut cpu = 0.0;
        let mut n = 0u64;
        while let Some(&item) = sm.queue.front() {
            if sm.budget + 1e-12 < item.cost {
                break;
            }
            let dest_c = self.insts[item.dest as usize].container as usize;
            if dest_c == c {
                let d = &mut self.insts[item.dest as usize];
                if d.queue + d.incoming >= cap {
                    break;
                }
                d.incoming += 1;
            }
            sm.queue.pop_front();
            sm.budget -= item.cost;
            sm.queued_work -= item.cost;
            cpu += item.cost;
            n += 1;
            if item.remote {
                self.counters.sm_received += 1;
            } else {
                self.counters.sm_ingested += 1;
            }
            if dest_c != c {
                self.counters.crossings += 1;
                let fwd = Item {
                    remote: true,
                    cost: route_cost,
                    ..item
                };
                if limited_link && self.edges[item.edge as usize].bytes > 0.0 {
                    sm.outbox.push_back(fwd);
                } else {
                    forwards.push((dest_c, fwd));
                }
            }
        }
        if sm.queue.is_empty() {
            sm.budget = 0.0;
            sm.queued_work = 0.0;
        }
        sm.handled += n;
        sm.win.processed += n;
        sm.win.cpu += cpu + self.gt.stream_manager.base * dt;
        sm.win.busy += cpu;
        self.counters.sm_handled[c] += n;
        for (dest_c, item) in forwards {
            let rx = &mut self.sms[dest_c];
            rx.incoming.push(item);
            rx.incoming_work += item.cost;
        }
    }

    /// Moves byte-carrying crossing tuples over container links with finite bandwidth.
    fn transfer(&mut self, dt: f64) {
        for (c, link) in self.container_link.iter().enumerate() {
            let sm = &mut self.sms[c];
            match link {
                Some(b) => sm.link_budget = (sm.link_budget + b * dt).min(2.0 * b * dt),
                None => sm.link_budget = f64::INFINITY,
            }
        }
        for c in 0..self.sms.len() {
            while let Some(&item) = self.sms[c].outbox.front() {
                let bytes = self.edges[item.edge as usize].bytes;
                let dest_c = self.insts[item.dest as usize].container as usize;
                if self.sms[c].link_budget < bytes || self.sms[dest_c].link_budget < bytes {
                    break;
                }
                self.sms[c].outbox.pop_front();
                self.sms[c].link_budget -= bytes;
                self.sms[dest_c].link_budget -= bytes;
                self.sms[dest_c].incoming.push(item);
                self.sms[dest_c].incoming_work += item.cost;
            }
        }
    }

    fn update_backpressure(&mut self, dt: f64) {
        let (hi, lo) = (self.opts.high_watermark, self.opts.low_watermark);
        let flip = |flag: &mut bool, q: f64| {
            if q > hi {
                *flag = true;
            } else if q < lo {
                *flag = false;
            }
        };
        let mut any = false;
        for inst in &mut self.insts {
            if inst.source_share > 0.0 {
                // A lagging source reports backpressure but pausing sources cannot relieve it.
                flip(&mut inst.flagged, inst.backlog);
            } else {
                flip(&mut inst.flagged, inst.queue as f64);
                any |= inst.flagged;
            }
            if inst.flagged {
                inst.win.bp += dt;
            }
        }
        for sm in &mut self.sms {
            flip(&mut sm.flagged, (sm.queue.len() + sm.outbox.len()) as f64);
            any |= sm.flagged;
            if sm.flagged {
                sm.win.bp += dt;
            }
        }
        self.paused = any;
        if any {
            self.bp_time += dt;
        }
    }

    fn close_window(&mut self, start: f64, out: &mut Vec<MetricSample>) {
        let w = self.opts.window;
        let ts = self.opts.epoch + start;
        let gc = self.gt.gc.clone();
        for i in 0..self.insts.len() {
            let inst = &mut self.insts[i];
            if let Some(gc) = &gc {
                if inst.garbage >= gc.threshold {
                    inst.garbage = 0.0;
                    inst.win.gc += gc.pause;
                }
            }
            let stats = std::mem::take(&mut inst.win);
            let node = &self.dag.nodes[inst.node].name;
            let truth = &self.gt.nodes[node];
            let rate = stats.processed as f64 / w;
            let cputil = self.noisy(stats.cpu / w);
            let inst = &self.insts[i];
            let mut push = |metric, value| {
                out.push(MetricSample {
                    ts,
                    node: node.clone(),
                    instance: inst.label.clone(),
                    container: inst.container,
                    metric,
                    value,
                });
            };
            push(MetricKind::TupleRateIn, rate);
            push(MetricKind::TupleRateOut, stats.emitted as f64 / w);
            push(MetricKind::Cputil, cputil);
            push(MetricKind::Caputil, stats.busy / w);
            if truth.has_memory() || gc.is_some() {
                push(MetricKind::Memutil, inst.mem_gauge);
            }
            push(MetricKind::Gctime, stats.gc);
            push(MetricKind::Backpressure, stats.bp);
            let inst = &mut self.insts[i];
            inst.mem_gauge = truth.mem_base + truth.mem_per_rate * rate + inst.garbage;
        }
        for c in 0..self.sms.len() {
            let stats = std::mem::take(&mut self.sms[c].win);
            let cputil = self.noisy(stats.cpu / w);
            let rate = stats.processed as f64 / w;
            let instance = sm_instance(c as u32);
            for (metric, value) in [
                (MetricKind::TupleRateIn, rate),
                (MetricKind::TupleRateOut, rate),
                (MetricKind::Cputil, cputil),
                (MetricKind::Caputil, stats.cpu / w / self.opts.sm_cpu_cap),
                (MetricKind::Gctime, 0.0),
                (MetricKind::Backpressure, stats.bp),
            ] {
                out.push(MetricSample {
                    ts,
                    node: STREAM_MANAGER.to_string(),
                    instance: instance.clone(),
                    container: c as u32,
                    metric,
                    value,
                });
            }
        }
    }

    fn noisy(&mut self, v: f64) -> f64 {
        match &self.noise {
            Some(n) => (v + n.sample(&mut self.rng)).max(0.0),
            None => v,
        }
    }

    fn finish_counters(&mut self) {
        for inst in &self.insts {
            let node = &self.dag.nodes[inst.node].name;
            self.counters
                .instance_processed
                .insert(inst.label.clone(), inst.processed);
            *self.counters.node_processed.get_mut(node).expect("node") += inst.processed;
        }
        for inst in &self.insts {
            let node = &self.dag.nodes[inst.node].name;
            *self.counters.node_emitted.get_mut(node).expect("node") += inst.emitted;
        }
        for (e, n) in self.edges.iter().zip(&self.edge_tuples) {
            self.counters.edge_tuples.insert(e.key.clone(), *n);
        }
        let mut in_flight = 0u64;
        for sm in &self.sms {
            in_flight += sm.outbox.len() as u64;
            in_flight += sm.queue.iter().chain(&sm.incoming).filter(|i| i.remote).count() as u64;
        }
        self.counters.crossings_in_flight = in_flight;
    }
}

/// Max-min fair split of `capacity` over `demand`.
pub fn water_fill(demand: &[f64], capacity: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..demand.len()).collect();
    order.sort_by(|&a, &b| demand[a].total_cmp(&demand[b]).then(a.cmp(&b)));
    let mut grant = vec![0.0; demand.len()];
    let mut left = capacity;
    for (k, &i) in order.iter().enumerate() {
        let share = left / (order.len() - k) as f64;
        let g = demand[i].min(share).max(0.0);
        grant[i] = g;
        left -= g;
    }
    grant
}

fn ols_slope(points: &[(f64, f64)]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Instance label used by metrics for the stream manager of container `c`.
pub fn sm_instance(c: u32) -> String {
    format!("SM-{c}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn water_fill_is_max_min_fair() {
        let g = water_fill(&[0.2, 5.0, 5.0], 2.0);
        assert!((g[0] - 0.2).abs() < 1e-12);
        assert!((g[1] - 0.9).abs() < 1e-12);
        assert!((g[2] - 0.9).abs() < 1e-12);
        let g = water_fill(&[0.5, 0.5], 3.0);
        assert_eq!(g, vec![0.5, 0.5]);
    }

    #[test]
    fn schedule_lookup() {
        let s = RateSchedule::staircase(&[10.0, 20.0, 30.0], 60.0);
        assert_eq!(s.rate_at(0.0), 10.0);
        assert_eq!(s.rate_at(59.99), 10.0);
        assert_eq!(s.rate_at(60.0), 20.0);
        assert_eq!(s.rate_at(1e6), 30.0);
        assert!((s.mean_rate(30.0, 90.0) - 15.0).abs() < 1e-12);
        assert!(RateSchedule { steps: vec![(1.0, 1.0)] }.validate().is_err());
    }

    #[test]
    fn slope_of_line() {
        let pts: Vec<_> = (0..10).map(|i| (i as f64, 3.0 * i as f64 + 1.0)).collect();
        assert!((ols_slope(&pts) - 3.0).abs() < 1e-12);
        assert_eq!(ols_slope(&[(1.0, 1.0)]), 0.0);
    }
}
