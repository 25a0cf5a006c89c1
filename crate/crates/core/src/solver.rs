//! Maximum sustainable rate of a configuration as a linear program over the flow network.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::config::Configuration;
use crate::dag::{edge_key, EdgeRateVector, Grouping, LogicalDag};
use crate::error::{Error, Result};
use crate::lp::{solve_lp, LinearProgram, LpSolution, Sense};
use crate::model::{ModelSet, NodeModel};
use crate::network::{build_network, FlowNetwork};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    /// Let shuffle-grouped edges split freely instead of evenly.
    pub locality_aware_shuffle: bool,
    /// CPU available to one stream manager; `None` removes the limit.
    pub sm_cpu_cap: Option<f64>,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            locality_aware_shuffle: false,
            sm_cpu_cap: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BottleneckKind {
    NodeCpu,
    SmCpu,
    ContainerCpu,
    ContainerMem,
    Link,
    Grouping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bottleneck {
    pub kind: BottleneckKind,
    pub subject: String,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub max_rate: f64,
    pub edge_rates: EdgeRateVector,
    pub bottlenecks: Vec<Bottleneck>,
    /// Input rate of every instance at the optimum.
    pub instance_rates: BTreeMap<String, f64>,
    /// Tuples handled per second by each container's stream manager.
    pub sm_flux: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Prediction {
    pub fn has_bottleneck(&self, kind: BottleneckKind) -> bool {
        self.bottlenecks.iter().any(|b| b.kind == kind)
    }

    pub fn total_sm_flux(&self) -> f64 {
        self.sm_flux.iter().sum()
    }
}

/// How the per-pair flows of one (producer instance, edge) are represented.
#[derive(Debug, Clone)]
enum PairVars {
    /// Every consumer instance receives the same flow.
    Equal(usize),
    /// One variable per consumer instance, in consumer order.
    Free(Vec<usize>),
}

impl PairVars {
    fn var(&self, consumer_pos: usize) -> usize {
        match self {
            PairVars::Equal(v) => *v,
            PairVars::Free(vs) => vs[consumer_pos],
        }
    }
}

/// Metadata for one LP row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowTag {
    /// `None` for structural equalities.
    pub kind: Option<BottleneckKind>,
    pub subject: String,
    /// Instance the row constrains, for per-instance rows.
    pub instance: Option<usize>,
}

/// A linear program together with the bookkeeping needed to read its solution back.
#[derive(Debug, Clone)]
pub struct EmittedLp {
    pub lp: LinearProgram,
    pub rows: Vec<RowTag>,
    /// Per (producer instance, dag edge index).
    flows: BTreeMap<(usize, usize), PairVars>,
    /// Source instance -> its emission variable.
    source_vars: BTreeMap<usize, usize>,
    /// Linear expression for the input rate of every instance.
    inputs: Vec<Vec<(usize, f64)>>,
    /// Linear expression for the stream-manager flux of every container.
    fluxes: Vec<Vec<(usize, f64)>>,
}

type Expr = Vec<(usize, f64)>;

fn tag(rows: &mut Vec<RowTag>, kind: Option<BottleneckKind>, subject: String, instance: Option<usize>) {
    rows.push(RowTag {
        kind,
        subject,
        instance,
    });
}

fn eval(expr: &[(usize, f64)], x: &[f64]) -> f64 {
    expr.iter().map(|&(j, a)| a * x[j]).sum()
}

fn scaled(expr: &[(usize, f64)], k: f64) -> Expr {
    expr.iter().map(|&(j, a)| (j, a * k)).collect()
}

/// Emits the rate-maximization program for a built network.
pub fn emit_lp(
    network: &FlowNetwork,
    dag: &LogicalDag,
    config: &Configuration,
    models: &ModelSet,
    options: &PredictOptions,
) -> Result<EmittedLp> {
    let sm = models.stream_manager()?;
    let node_model = |name: &str| models.require(name);
    let mut lp = LinearProgram::new();
    let mut rows = Vec::new();
    let n_inst = network.instances.len();

    // Position of each instance among the instances of its node.
    let mut pos = vec![0usize; n_inst];
    for list in network.node_instances.values() {
        for (k, &i) in list.iter().enumerate() {
            pos[i] = k;
        }
    }

    let mut source_vars = BTreeMap::new();
    for node in dag.sources() {
        for &u in network.instances_of(&node.name) {
            let v = lp.add_variable(format!("s[{}]", network.instances[u]));
            source_vars.insert(u, v);
        }
    }

    let mut flows = BTreeMap::new();
    for (ei, e) in dag.edges.iter().enumerate() {
        let consumers = network.instances_of(&e.dst);
        let free = e.grouping == Grouping::Shuffle && options.locality_aware_shuffle;
        for &u in network.instances_of(&e.src) {
            let pv = if free {
                PairVars::Free(
                    consumers
                        .iter()
                        .map(|&q| {
                            lp.add_variable(format!(
                                "f[{}->{}]",
                                network.instances[u], network.instances[q]
                            ))
                        })
                        .collect(),
                )
            } else {
                PairVars::Equal(lp.add_variable(format!("y[{}->{}]", network.instances[u], e.dst)))
            };
            flows.insert((u, ei), pv);
        }
    }

    let mut inputs: Vec<Expr> = vec![Vec::new(); n_inst];
    for (&u, &v) in &source_vars {
        inputs[u].push((v, 1.0));
    }
    for (ei, e) in dag.edges.iter().enumerate() {
        for &q in network.instances_of(&e.dst) {
            for &u in network.instances_of(&e.src) {
                inputs[q].push((flows[&(u, ei)].var(pos[q]), 1.0));
            }
        }
    }

    // Conservation with gamma for every (producer instance, out-edge).
    for (ei, e) in dag.edges.iter().enumerate() {
        let gamma = node_model(&e.src)?.gamma;
        let p_v = network.instances_of(&e.dst).len() as f64;
        for &u in network.instances_of(&e.src) {
            let mut terms = scaled(&inputs[u], -gamma * e.weight);
            match &flows[&(u, ei)] {
                PairVars::Equal(y) => {
                    let copies = if e.grouping == Grouping::All { 1.0 } else { p_v };
                    terms.push((*y, copies));
                }
                PairVars::Free(vs) => terms.extend(vs.iter().map(|&v| (v, 1.0))),
            }
            lp.add_constraint(
                format!("flow[{}->{}]", network.instances[u], e.dst),
                terms,
                Sense::Eq,
                0.0,
            );
            tag(&mut rows, None, edge_key(&e.src, &e.dst), Some(u));
        }
    }

    // Sources: equal emission within a node, weighted shares across nodes.
    let mut first_source: Option<(usize, f64, f64)> = None;
    for node in dag.sources() {
        let list = network.instances_of(&node.name);
        let s0 = source_vars[&list[0]];
        for &u in &list[1..] {
            lp.add_constraint(
                format!("fair[{}]", network.instances[u]),
                vec![(source_vars[&u], 1.0), (s0, -1.0)],
                Sense::Eq,
                0.0,
            );
            tag(&mut rows, None, node.name.clone(), Some(u));
        }
        let p = list.len() as f64;
        match first_source {
            None => first_source = Some((s0, p, node.source_weight)),
            Some((a0, pa, wa)) => {
                lp.add_constraint(
                    format!("share[{}]", node.name),
                    vec![(s0, p * wa), (a0, -pa * node.source_weight)],
                    Sense::Eq,
                    0.0,
                );
                tag(&mut rows, None, node.name.clone(), None);
            }
        }
    }

    // Per-instance CPU budget and saturation.
    for (u, id) in network.instances.iter().enumerate() {
        let m = node_model(&id.node)?;
        let budget = dag.node(&id.node).map_or(1.0, |n| n.max_cpu);
        lp.add_constraint(
            format!("cpu[{id}]"),
            scaled(&inputs[u], m.cpu.slope),
            Sense::Le,
            budget - m.cpu.intercept,
        );
        tag(&mut rows, Some(BottleneckKind::NodeCpu), id.to_string(), Some(u));
        if let Some(sat) = m.saturation_rate {
            lp.add_constraint(format!("sat[{id}]"), inputs[u].clone(), Sense::Le, sat);
            tag(&mut rows, Some(BottleneckKind::NodeCpu), id.to_string(), Some(u));
        }
    }

    // Stream-manager flux per container: every pair flow is ingested by the producer's
    // stream manager and, when it crosses containers, again by the consumer's.
    let m = network.containers as usize;
    let mut fluxes: Vec<Expr> = vec![Vec::new(); m];
    let mut link_use: Vec<Expr> = vec![Vec::new(); m];
    for (ei, e) in dag.edges.iter().enumerate() {
        let consumers = network.instances_of(&e.dst);
        let counts = network.node_counts(&e.dst);
        let bytes = e.bytes_per_tuple;
        for &u in network.instances_of(&e.src) {
            let cu = network.instance_container[u] as usize;
            match &flows[&(u, ei)] {
                PairVars::Equal(y) => {
                    let local = counts[cu] as f64;
                    let total = consumers.len() as f64;
                    fluxes[cu].push((*y, total));
                    for c in (0..m).filter(|&c| c != cu && counts[c] > 0) {
                        fluxes[c].push((*y, counts[c] as f64));
                        if bytes > 0.0 {
                            link_use[c].push((*y, bytes * counts[c] as f64));
                        }
                    }
                    if bytes > 0.0 && total > local {
                        link_use[cu].push((*y, bytes * (total - local)));
                    }
                }
                PairVars::Free(vs) => {
                    for (k, &q) in consumers.iter().enumerate() {
                        let cq = network.instance_container[q] as usize;
                        fluxes[cu].push((vs[k], 1.0));
                        if cq != cu {
                            fluxes[cq].push((vs[k], 1.0));
                            if bytes > 0.0 {
                                link_use[cu].push((vs[k], bytes));
                                link_use[cq].push((vs[k], bytes));
                            }
                        }
                    }
                }
            }
        }
    }

    for c in 0..m {
        let dims = config.dims(c as u32);
        let label = format!("container-{c}");
        if let Some(cap) = options.sm_cpu_cap {
            lp.add_constraint(
                format!("sm[{c}]"),
                scaled(&fluxes[c], sm.cpu.slope),
                Sense::Le,
                cap - sm.cpu.intercept,
            );
            tag(&mut rows, Some(BottleneckKind::SmCpu), label.clone(), None);
        }

        let members: Vec<usize> = (0..n_inst)
            .filter(|&u| network.instance_container[u] as usize == c)
            .collect();
        let mut cpu_terms = scaled(&fluxes[c], sm.cpu.slope);
        let mut cpu_fixed = sm.cpu.intercept;
        let mut mem_terms: Expr = Vec::new();
        let mut mem_fixed = 0.0;
        let mut any_mem = false;
        if let Some(mm) = sm.memory {
            any_mem = true;
            mem_terms.extend(scaled(&fluxes[c], mm.slope));
            mem_fixed += mm.intercept;
        }
        for &u in &members {
            let model: &NodeModel = node_model(&network.instances[u].node)?;
            let line = model.consumed_cpu();
            cpu_terms.extend(scaled(&inputs[u], line.slope));
            cpu_fixed += line.intercept;
            if let Some(mm) = model.memory {
                any_mem = true;
                mem_terms.extend(scaled(&inputs[u], mm.slope));
                mem_fixed += mm.intercept;
            }
        }
        lp.add_constraint(
            format!("ccpu[{c}]"),
            cpu_terms,
            Sense::Le,
            dims.cpu - cpu_fixed,
        );
        tag(&mut rows, Some(BottleneckKind::ContainerCpu), label.clone(), None);
        if any_mem {
            lp.add_constraint(format!("cmem[{c}]"), mem_terms, Sense::Le, dims.mem - mem_fixed);
            tag(&mut rows, Some(BottleneckKind::ContainerMem), label.clone(), None);
        }
        if let Some(link) = dims.link {
            if !link_use[c].is_empty() {
                lp.add_constraint(format!("link[{c}]"), link_use[c].clone(), Sense::Le, link);
                tag(&mut rows, Some(BottleneckKind::Link), label.clone(), None);
            }
        }
    }

    let objective = source_vars.values().map(|&v| (v, 1.0)).collect();
    lp.set_objective(objective);

    for c in &lp.constraints {
        let nonneg = c.terms.iter().all(|t| t.1 >= 0.0);
        if c.sense == Sense::Le && nonneg && c.rhs < -1e-12 {
            return Err(Error::Infeasible(format!(
                "`{}`: fixed costs alone exceed the budget by {:.4}",
                c.name, -c.rhs
            )));
        }
    }

    Ok(EmittedLp {
        lp,
        rows,
        flows,
        source_vars,
        inputs,
        fluxes,
    })
}

/// A solved program with its network, for inspecting per-arc flows.
#[derive(Debug, Clone)]
pub struct SolvedNetwork {
    pub network: FlowNetwork,
    pub emitted: EmittedLp,
    pub solution: LpSolution,
    pub prediction: Prediction,
}

impl SolvedNetwork {
    /// Flow on every arc of the network at the optimum.
    pub fn arc_flows(&self, dag: &LogicalDag) -> Vec<f64> {
        let net = &self.network;
        let x = &self.solution.values;
        let mut flow = vec![0.0; net.arcs.len()];
        for (ei, e) in dag.edges.iter().enumerate() {
            let consumers = net.instances_of(&e.dst);
            for &u in net.instances_of(&e.src) {
                let pv = &self.emitted.flows[&(u, ei)];
                for (k, &q) in consumers.iter().enumerate() {
                    let f = x[pv.var(k)];
                    for a in net.pair_path(u, q) {
                        flow[a] += f;
                    }
                }
            }
        }
        flow
    }

    /// Emission rate of every source instance at the optimum.
    pub fn source_rates(&self) -> BTreeMap<usize, f64> {
        self.emitted
            .source_vars
            .iter()
            .map(|(&u, &v)| (u, self.solution.values[v]))
            .collect()
    }
}

pub fn predict_rate(
    dag: &LogicalDag,
    config: &Configuration,
    models: &ModelSet,
) -> Result<Prediction> {
    predict_with(dag, config, models, &PredictOptions::default())
}

pub fn predict_with(
    dag: &LogicalDag,
    config: &Configuration,
    models: &ModelSet,
    options: &PredictOptions,
) -> Result<Prediction> {
    Ok(solve_network(dag, config, models, options)?.prediction)
}

pub fn solve_network(
    dag: &LogicalDag,
    config: &Configuration,
    models: &ModelSet,
    options: &PredictOptions,
) -> Result<SolvedNetwork> {
    let network = build_network(dag, config, models)?;
    let emitted = emit_lp(&network, dag, config, models, options)?;
    let solution = solve_lp(&emitted.lp)?;
    let prediction = read_prediction(&network, &emitted, &solution, dag, models)?;
    Ok(SolvedNetwork {
        network,
        emitted,
        solution,
        prediction,
    })
}

fn read_prediction(
    net: &FlowNetwork,
    emitted: &EmittedLp,
    sol: &LpSolution,
    dag: &LogicalDag,
    models: &ModelSet,
) -> Result<Prediction> {
    let x = &sol.values;
    let rates: Vec<f64> = emitted.inputs.iter().map(|e| eval(e, x).max(0.0)).collect();
    let instance_rates = net
        .instances
        .iter()
        .zip(&rates)
        .map(|(id, r)| (id.to_string(), *r))
        .collect();

    let mut edges = BTreeMap::new();
    for e in &dag.edges {
        let gamma = models.require(&e.src)?.gamma;
        let total: f64 = net
            .instances_of(&e.src)
            .iter()
            .map(|&u| rates[u] * gamma * e.weight)
            .sum();
        edges.insert(e.key(), total);
    }

    let mut seen = BTreeSet::new();
    let mut bottlenecks = Vec::new();
    let mut tight_instances = BTreeSet::new();
    for &k in &sol.tight {
        let tag = &emitted.rows[k];
        let Some(kind) = tag.kind else { continue };
        if kind == BottleneckKind::NodeCpu {
            if let Some(u) = tag.instance {
                tight_instances.insert(u);
            }
        }
        if seen.insert((kind, tag.subject.clone())) {
            bottlenecks.push(Bottleneck {
                kind,
                subject: tag.subject.clone(),
                slack: sol.slacks[k].abs(),
            });
        }
    }

    // An evenly split edge binds when one consumer saturates while a sibling still has room.
    for (ei, e) in dag.edges.iter().enumerate() {
        let consumers = net.instances_of(&e.dst);
        let even = net
            .instances_of(&e.src)
            .first()
            .and_then(|&u| emitted.flows.get(&(u, ei)))
            .is_some_and(|pv| matches!(pv, PairVars::Equal(_)))
            && e.grouping != Grouping::All;
        if !even || consumers.len() < 2 {
            continue;
        }
        let any_tight = consumers.iter().any(|q| tight_instances.contains(q));
        let any_slack = consumers.iter().any(|q| !tight_instances.contains(q));
        if any_tight && any_slack && seen.insert((BottleneckKind::Grouping, e.key())) {
            bottlenecks.push(Bottleneck {
                kind: BottleneckKind::Grouping,
                subject: e.key(),
                slack: 0.0,
            });
        }
    }

    let mut warnings = Vec::new();
    let mut warned = BTreeSet::new();
    for (u, id) in net.instances.iter().enumerate() {
        let m = models.require(&id.node)?;
        if m.is_extrapolation(rates[u]) && warned.insert(id.node.clone()) {
            warnings.push(format!(
                "{}: rate {:.1} outside trained range [{:.1}, {:.1}]",
                id.node, rates[u], m.cpu.x_min, m.cpu.x_max
            ));
        }
    }
    let sm_flux: Vec<f64> = emitted.fluxes.iter().map(|f| eval(f, x)).collect();
    let sm = models.stream_manager()?;
    if let Some(f) = sm_flux.iter().find(|&&f| sm.is_extrapolation(f)) {
        warnings.push(format!(
            "{}: flux {:.1} outside trained range [{:.1}, {:.1}]",
            sm.node, f, sm.cpu.x_min, sm.cpu.x_max
        ));
    }

    Ok(Prediction {
        max_rate: sol.objective.max(0.0),
        edge_rates: EdgeRateVector(edges),
        bottlenecks,
        instance_rates,
        sm_flux,
        warnings,
    })
}
