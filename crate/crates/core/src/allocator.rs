//! Balanced-container allocation for a target source rate.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Configuration, ContainerDims, InstanceId};
use crate::dag::{propagate_with, Grouping, LogicalDag, LogicalRates};
use crate::error::{Error, Result};
use crate::model::{ModelSet, NodeModel};
use crate::solver::{predict_rate, predict_with, Bottleneck, PredictOptions};

/// Container memory used when no memory model says otherwise.
pub const DEFAULT_CONTAINER_MEM: f64 = 1024.0 * 1024.0 * 1024.0;

fn default_phi() -> f64 {
    1.0
}

fn default_sm_cpu() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPolicy {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preferred_container_cpu: Option<f64>,
    /// Preferred container CPU sizes to try; the cheapest allocation wins.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_dims: Option<Vec<f64>>,
    #[serde(default = "default_phi")]
    pub overprovision_factor: f64,
    /// Size each group's containers to its own template instead of one uniform size.
    #[serde(default)]
    pub per_group_dims: bool,
    /// CPU a stream manager may use.
    #[serde(default = "default_sm_cpu")]
    pub sm_cpu: f64,
}

impl Default for AllocationPolicy {
    fn default() -> Self {
        AllocationPolicy {
            preferred_container_cpu: None,
            candidate_dims: None,
            overprovision_factor: 1.0,
            per_group_dims: false,
            sm_cpu: 1.0,
        }
    }
}

impl AllocationPolicy {
    pub fn from_json(text: &str) -> Result<Self> {
        let p: AllocationPolicy = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.preferred_container_cpu, Some(c) if !(c > 0.0)) {
            return Err(Error::InvalidArgument(
                "preferred_container_cpu must be > 0".into(),
            ));
        }
        if let Some(c) = self
            .candidate_dims
            .iter()
            .flatten()
            .find(|c| !(**c > 0.0))
        {
            return Err(Error::InvalidArgument(format!(
                "candidate dimension {c} must be > 0"
            )));
        }
        if !(self.overprovision_factor >= 1.0) {
            return Err(Error::InvalidArgument(
                "overprovision_factor must be >= 1".into(),
            ));
        }
        if !(self.sm_cpu > 0.0) {
            return Err(Error::InvalidArgument("sm_cpu must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerTemplate {
    /// One or two node names; the first is the group's input node.
    pub group: Vec<String>,
    pub instances: BTreeMap<String, u32>,
    /// Modeled CPU of one instance of each node at the matched rate.
    pub per_instance_cpu: BTreeMap<String, f64>,
    /// Input rate of each node across the template.
    pub node_rates: BTreeMap<String, f64>,
    pub sm_cpu: f64,
    pub cpu_dim: f64,
    pub mem_dim: f64,
    /// Input rate of the group's first node that one container sustains.
    pub edge_rate: f64,
    pub alpha: f64,
}

/// Stream-manager flux for an edge P -> Q when every hop around the container is remote.
pub fn worst_case_sm_flux(edge_rate: f64, gamma_p: f64, gamma_q: f64) -> f64 {
    edge_rate * (1.0 + 2.0 * gamma_p + gamma_p * gamma_q)
}

/// Lookups shared by every group of one allocation: unit-rate propagation, out-edge weight
/// sums and CPU budgets, all keyed by node name.
struct Context<'a> {
    unit: LogicalRates,
    out_weight: HashMap<&'a str, f64>,
    budget: HashMap<&'a str, f64>,
    successors: Vec<Vec<usize>>,
}

impl<'a> Context<'a> {
    fn new(dag: &'a LogicalDag, models: &ModelSet) -> Result<Self> {
        let unit = propagate_with(dag, |n| models.get(n).map(|m| m.gamma), 1.0)?;
        let index: HashMap<&str, usize> = dag
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.name.as_str(), i))
            .collect();
        let mut out_weight: HashMap<&str, f64> = HashMap::new();
        let mut successors = vec![Vec::new(); dag.nodes.len()];
        for e in &dag.edges {
            *out_weight.entry(e.src.as_str()).or_default() += e.weight;
            successors[index[e.src.as_str()]].push(index[e.dst.as_str()]);
        }
        let budget = dag
            .nodes
            .iter()
            .map(|n| (n.name.as_str(), n.max_cpu))
            .collect();
        Ok(Context {
            unit,
            out_weight,
            budget,
            successors,
        })
    }

    fn output_rate(&self, models: &ModelSet, node: &str, input: f64) -> Result<f64> {
        let g = models.require(node)?.gamma;
        Ok(input * g * self.out_weight.get(node).copied().unwrap_or(0.0))
    }

    fn input(&self, node: &str) -> f64 {
        self.unit.node_input.get(node).copied().unwrap_or(0.0)
    }
}

/// Greedy pairing in topological order: each unpaired node takes its heaviest unpaired
/// out-neighbor, where weight is CPU slope times the node's rate at unit source rate.
pub fn pair_nodes(dag: &LogicalDag, models: &ModelSet) -> Result<Vec<Vec<String>>> {
    pair_with(&Context::new(dag, models)?, dag, models)
}

fn pair_with(ctx: &Context<'_>, dag: &LogicalDag, models: &ModelSet) -> Result<Vec<Vec<String>>> {
    let weight = |n: &str| -> Result<f64> { Ok(models.require(n)?.cpu.slope * ctx.input(n)) };
    let mut paired = vec![false; dag.nodes.len()];
    let mut groups = Vec::new();
    for i in dag.topological_order() {
        if paired[i] {
            continue;
        }
        paired[i] = true;
        let name = &dag.nodes[i].name;
        let mut best: Option<(usize, f64)> = None;
        for &j in &ctx.successors[i] {
            if paired[j] {
                continue;
            }
            let w = weight(&dag.nodes[j].name)?;
            if best.is_none_or(|(_, bw)| w > bw) {
                best = Some((j, w));
            }
        }
        match best {
            Some((j, _)) => {
                paired[j] = true;
                groups.push(vec![name.clone(), dag.nodes[j].name.clone()]);
            }
            None => groups.push(vec![name.clone()]),
        }
    }
    Ok(groups)
}

/// Worst-case stream-manager flux per unit input rate of the group's first node.
fn group_flux_per_unit(
    ctx: &Context<'_>,
    models: &ModelSet,
    group: &[String],
    ratios: &BTreeMap<String, f64>,
) -> Result<f64> {
    let p = &group[0];
    let out_p = ctx.output_rate(models, p, 1.0)?;
    match group.get(1) {
        None => Ok(1.0 + 2.0 * out_p),
        Some(q) => {
            let rq = ratios[q];
            Ok(1.0 + out_p + rq + ctx.output_rate(models, q, rq)?)
        }
    }
}

fn instance_count(rate: f64, peak: f64) -> u32 {
    let n = (rate / peak - 1e-9).ceil();
    n.max(1.0) as u32
}

struct GroupShape<'a> {
    /// (name, model, input ratio to the head node, CPU budget per instance)
    nodes: Vec<(&'a str, &'a NodeModel, f64, f64)>,
    flux_per_unit: f64,
}

fn group_shape<'a>(
    ctx: &Context<'_>,
    models: &'a ModelSet,
    group: &'a [String],
) -> Result<GroupShape<'a>> {
    if group.is_empty() || group.len() > 2 {
        return Err(Error::InvalidArgument(format!(
            "groups hold one or two nodes, got {}",
            group.len()
        )));
    }
    let head_in = ctx.input(&group[0]);
    if !(head_in > 0.0) {
        return Err(Error::Allocation(format!(
            "node `{}` receives no traffic",
            group[0]
        )));
    }
    let mut ratios = BTreeMap::new();
    let mut nodes = Vec::new();
    for n in group {
        let ratio = ctx.input(n) / head_in;
        ratios.insert(n.clone(), ratio);
        let model = models.require(n)?;
        let budget = ctx.budget.get(n.as_str()).copied().unwrap_or(model.max_cpu);
        nodes.push((n.as_str(), model, ratio, budget));
    }
    let flux_per_unit = group_flux_per_unit(ctx, models, group, &ratios)?;
    Ok(GroupShape {
        nodes,
        flux_per_unit,
    })
}

/// Sizes a container at `edge_rate`, with the stream manager modeled at the worst-case flux.
fn size_at(shape: &GroupShape<'_>, sm: &NodeModel, edge_rate: f64) -> Result<ContainerTemplate> {
    let flux = edge_rate * shape.flux_per_unit;
    let sm_cpu = sm.cpu_at(flux).max(0.0);
    let mut cpu = sm_cpu;
    let mut mem = sm.memory_at(flux);
    let mut instances = BTreeMap::new();
    let mut shares = BTreeMap::new();
    let mut rates = BTreeMap::new();
    for &(name, model, ratio, budget) in &shape.nodes {
        let peak = model.peak_rate(budget);
        if !(peak > 0.0) {
            return Err(Error::Allocation(format!(
                "node `{name}` cannot process any tuples within {budget} CPU"
            )));
        }
        let rate = edge_rate * ratio;
        let n = instance_count(rate, peak);
        let per = model.consumed_cpu().predict(rate / n as f64).max(0.0);
        cpu += n as f64 * per;
        mem += n as f64 * model.memory_at(rate / n as f64);
        instances.insert(name.to_string(), n);
        shares.insert(name.to_string(), per);
        rates.insert(name.to_string(), rate);
    }
    Ok(ContainerTemplate {
        group: shape.nodes.iter().map(|n| n.0.to_string()).collect(),
        instances,
        per_instance_cpu: shares,
        node_rates: rates,
        sm_cpu,
        cpu_dim: cpu,
        mem_dim: mem,
        edge_rate,
        alpha: 1.0,
    })
}

/// Rate-matched container for a group with the stream manager at its CPU cap.
pub fn compose_balanced_container(
    dag: &LogicalDag,
    group: &[String],
    models: &ModelSet,
    sm_cpu: f64,
) -> Result<ContainerTemplate> {
    let ctx = Context::new(dag, models)?;
    compose(&group_shape(&ctx, models, group)?, models, sm_cpu)
}

fn compose(shape: &GroupShape<'_>, models: &ModelSet, sm_cpu: f64) -> Result<ContainerTemplate> {
    let sm = models.stream_manager()?;
    let sm_peak = sm.peak_rate(sm_cpu);
    if !(sm_peak > 0.0) || !sm_peak.is_finite() {
        return Err(Error::Allocation(format!(
            "stream-manager peak flux at {sm_cpu} CPU is {sm_peak}"
        )));
    }
    size_at(shape, sm, sm_peak / shape.flux_per_unit)
}

/// Shrinks a template to `preferred_cpu` by scaling its rate with the largest alpha whose
/// re-sized container still fits.
pub fn scale_template(
    dag: &LogicalDag,
    models: &ModelSet,
    template: &ContainerTemplate,
    preferred_cpu: f64,
) -> Result<ContainerTemplate> {
    let ctx = Context::new(dag, models)?;
    scale(&group_shape(&ctx, models, &template.group)?, models, template, preferred_cpu)
}

fn scale(
    shape: &GroupShape<'_>,
    models: &ModelSet,
    template: &ContainerTemplate,
    preferred_cpu: f64,
) -> Result<ContainerTemplate> {
    if !(preferred_cpu > 0.0) {
        return Err(Error::InvalidArgument("preferred CPU must be > 0".into()));
    }
    if preferred_cpu >= template.cpu_dim {
        return Ok(template.clone());
    }
    let sm = models.stream_manager()?;
    let fits = |alpha: f64| -> Result<bool> {
        Ok(size_at(shape, sm, template.edge_rate * alpha)?.cpu_dim <= preferred_cpu + 1e-12)
    };
    let floor = size_at(shape, sm, 0.0)?.cpu_dim;
    if floor > preferred_cpu {
        return Err(Error::Allocation(format!(
            "fixed costs of group {:?} need {floor:.3} CPU, more than the preferred {preferred_cpu}",
            template.group
        )));
    }
    let mut alpha = preferred_cpu / template.cpu_dim;
    if !fits(alpha)? {
        let (mut lo, mut hi) = (0.0, alpha);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if fits(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        alpha = lo;
    }
    if !(alpha > 0.0) {
        return Err(Error::Allocation(format!(
            "group {:?} cannot be scaled to {preferred_cpu} CPU",
            template.group
        )));
    }
    let mut scaled = size_at(shape, sm, template.edge_rate * alpha)?;
    scaled.cpu_dim = preferred_cpu;
    scaled.alpha = template.alpha * alpha;
    Ok(scaled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub configuration: Configuration,
    pub templates: Vec<ContainerTemplate>,
    /// Containers per template, in template order.
    pub replicas: Vec<u32>,
    pub adjusted_target: f64,
    pub total_cpu: f64,
}

/// Allocates balanced containers so that the configuration sustains `target_rate` times the
/// policy's over-provisioning factor.
pub fn allocate(
    dag: &LogicalDag,
    models: &ModelSet,
    target_rate: f64,
    policy: &AllocationPolicy,
) -> Result<Allocation> {
    policy.validate()?;
    if !(target_rate > 0.0) || !target_rate.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "target rate must be > 0, got {target_rate}"
        )));
    }
    match &policy.candidate_dims {
        Some(cands) if !cands.is_empty() => {
            let mut sorted = cands.clone();
            sorted.sort_by(f64::total_cmp);
            let mut best: Option<Allocation> = None;
            let mut last_err = None;
            for c in sorted {
                match allocate_with(dag, models, target_rate, policy, Some(c)) {
                    Ok(a) => {
                        if best.as_ref().is_none_or(|b| a.total_cpu < b.total_cpu - 1e-9) {
                            best = Some(a);
                        }
                    }
                    Err(e) => last_err = Some(e),
                }
            }
            best.ok_or_else(|| last_err.expect("at least one candidate"))
        }
        _ => allocate_with(dag, models, target_rate, policy, policy.preferred_container_cpu),
    }
}

fn allocate_with(
    dag: &LogicalDag,
    models: &ModelSet,
    target_rate: f64,
    policy: &AllocationPolicy,
    preferred: Option<f64>,
) -> Result<Allocation> {
    let adjusted = target_rate * policy.overprovision_factor;
    let required = propagate_with(dag, |n| models.get(n).map(|m| m.gamma), adjusted)?;
    let ctx = Context::new(dag, models)?;
    let groups = pair_with(&ctx, dag, models)?;
    let sm = models.stream_manager()?;
    let mut templates = Vec::with_capacity(groups.len());
    let mut replicas = Vec::with_capacity(groups.len());
    for g in &groups {
        let shape = group_shape(&ctx, models, g)?;
        let t = compose(&shape, models, policy.sm_cpu)?;
        let t = match preferred {
            Some(p) => scale(&shape, models, &t, p)?,
            None => t,
        };
        let need = required.node_input.get(&g[0]).copied().unwrap_or(0.0);
        let count = instance_count(need, t.edge_rate);
        replicas.push(count);
        // Without a preferred size, containers shrink to the rate each replica carries.
        let t = if preferred.is_none() && need > 0.0 {
            let rate = need / count as f64;
            let mut fitted = size_at(&shape, sm, rate)?;
            fitted.alpha = t.alpha * rate / t.edge_rate;
            fitted
        } else {
            t
        };
        templates.push(t);
    }
    let uniform = ContainerDims::new(
        templates.iter().map(|t| t.cpu_dim).fold(0.0, f64::max),
        mem_or_default(templates.iter().map(|t| t.mem_dim).fold(0.0, f64::max)),
    );

    let mut parallelism: BTreeMap<String, u32> = BTreeMap::new();
    let mut packing = BTreeMap::new();
    let mut overrides = BTreeMap::new();
    let mut container = 0u32;
    for (t, &count) in templates.iter().zip(&replicas) {
        for _ in 0..count {
            for node in &t.group {
                let k = parallelism.entry(node.clone()).or_insert(0);
                for _ in 0..t.instances[node] {
                    packing.insert(InstanceId::new(node, *k).to_string(), container);
                    *k += 1;
                }
            }
            if policy.per_group_dims {
                overrides.insert(
                    container,
                    ContainerDims::new(t.cpu_dim, mem_or_default(t.mem_dim)),
                );
            }
            container += 1;
        }
    }
    let mut configuration = Configuration {
        parallelism,
        container: uniform,
        containers: container,
        packing,
        container_overrides: BTreeMap::new(),
    };
    if policy.per_group_dims {
        // Keep only the containers that differ from the shared size.
        configuration.container = overrides.values().next().copied().unwrap_or(uniform);
        configuration.container_overrides = overrides
            .into_iter()
            .filter(|(_, d)| *d != configuration.container)
            .collect();
    }
    configuration.validate(dag)?;
    let total_cpu = configuration.total_cpu();
    Ok(Allocation {
        configuration,
        templates,
        replicas,
        adjusted_target: adjusted,
        total_cpu,
    })
}

fn mem_or_default(mem: f64) -> f64 {
    if mem > 0.0 {
        mem
    } else {
        DEFAULT_CONTAINER_MEM
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Verification {
    Ok {
        predicted: f64,
    },
    Short {
        predicted: f64,
        gap: f64,
        bottlenecks: Vec<Bottleneck>,
    },
}

impl Verification {
    pub fn is_ok(&self) -> bool {
        matches!(self, Verification::Ok { .. })
    }

    pub fn predicted(&self) -> f64 {
        match *self {
            Verification::Ok { predicted } | Verification::Short { predicted, .. } => predicted,
        }
    }
}

pub fn verify_allocation(
    dag: &LogicalDag,
    models: &ModelSet,
    config: &Configuration,
    target_rate: f64,
) -> Result<Verification> {
    let p = predict_rate(dag, config, models)?;
    // Allow for the solver's relative feasibility tolerance.
    Ok(if p.max_rate >= target_rate * (1.0 - 1e-9) {
        Verification::Ok {
            predicted: p.max_rate,
        }
    } else {
        Verification::Short {
            predicted: p.max_rate,
            gap: target_rate - p.max_rate,
            bottlenecks: p.bottlenecks,
        }
    })
}

/// Parallelism and CPU of the most efficient single-container deployment for `target_rate`
/// with no stream-manager limit.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalLine {
    pub parallelism: BTreeMap<String, u32>,
    pub total_cpu: f64,
}

pub fn optimal_cpu(dag: &LogicalDag, models: &ModelSet, target_rate: f64) -> Result<OptimalLine> {
    let sm = models.stream_manager()?;
    let rates = propagate_with(dag, |n| models.get(n).map(|m| m.gamma), target_rate)?;
    let mut parallelism = BTreeMap::new();
    let mut cpu = 0.0;
    for node in &dag.nodes {
        let m = models.require(&node.name)?;
        let r = rates.node_input[&node.name];
        let peak = m.peak_rate(node.max_cpu);
        if !(peak > 0.0) {
            return Err(Error::Allocation(format!(
                "node `{}` cannot process any tuples",
                node.name
            )));
        }
        let n = instance_count(r, peak);
        parallelism.insert(node.name.clone(), n);
        let line = m.consumed_cpu();
        cpu += line.slope * r + n as f64 * line.intercept;
    }
    let mut flux = 0.0;
    for e in &dag.edges {
        let copies = if e.grouping == Grouping::All {
            parallelism[&e.dst] as f64
        } else {
            1.0
        };
        flux += rates.edges.0[&e.key()] * copies;
    }
    cpu += sm.cpu_at(flux).max(0.0);
    Ok(OptimalLine {
        parallelism,
        total_cpu: cpu,
    })
}

/// Checks an optimal line by predicting the single-container deployment it describes.
pub fn optimal_line_prediction(
    dag: &LogicalDag,
    models: &ModelSet,
    line: &OptimalLine,
) -> Result<f64> {
    let layout: Vec<&str> = dag
        .nodes
        .iter()
        .flat_map(|n| std::iter::repeat_n(n.name.as_str(), line.parallelism[&n.name] as usize))
        .collect();
    let cfg = Configuration::from_layout(
        ContainerDims::new(line.total_cpu, f64::MAX / 4.0),
        &[layout],
    );
    let opts = PredictOptions {
        sm_cpu_cap: None,
        ..PredictOptions::default()
    };
    Ok(predict_with(dag, &cfg, models, &opts)?.max_rate)
}

/// Cheapest round-robin deployment reaching `target_rate`: every node at the same
/// parallelism, `per_container` instances per container, one CPU per instance plus one for
/// the stream manager.
pub fn round_robin_baseline(
    dag: &LogicalDag,
    models: &ModelSet,
    target_rate: f64,
    per_container: u32,
    max_parallelism: u32,
) -> Result<Option<(Configuration, f64)>> {
    if per_container == 0 {
        return Err(Error::InvalidArgument("per_container must be >= 1".into()));
    }
    let n = dag.nodes.len() as u32;
    for p in 1..=max_parallelism {
        let par: BTreeMap<String, u32> = dag.nodes.iter().map(|x| (x.name.clone(), p)).collect();
        let containers = (n * p).div_ceil(per_container);
        let dims = ContainerDims::new(per_container as f64 + 1.0, DEFAULT_CONTAINER_MEM * 64.0);
        let cfg = Configuration::round_robin(dag, &par, containers, dims);
        match predict_rate(dag, &cfg, models) {
            Ok(pred) if pred.max_rate >= target_rate => {
                let cpu = cfg.total_cpu();
                return Ok(Some((cfg, cpu)));
            }
            Ok(_) | Err(Error::Infeasible(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}
