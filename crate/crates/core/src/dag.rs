//! Logical DAG types, validation and rate propagation.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSet;

/// Name under which stream managers appear in metrics and model files.
pub const STREAM_MANAGER: &str = "__stream_manager__";

/// How an edge distributes tuples over the instances of its consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    /// Hash of the tuple key picks the consumer instance.
    Fields,
    /// A uniformly random consumer instance.
    Shuffle,
    /// Every consumer instance receives a copy.
    All,
}

fn default_max_cpu() -> f64 {
    1.0
}

fn default_weight() -> f64 {
    1.0
}

fn is_one(v: &f64) -> bool {
    *v == 1.0
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    /// CPU cores a single instance can use (single-threaded operators use 1.0).
    #[serde(default = "default_max_cpu")]
    pub max_cpu: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint: Option<u32>,
    /// Share of the aggregate source rate taken by this node when it is a source.
    #[serde(default = "default_weight", skip_serializing_if = "is_one")]
    pub source_weight: f64,
}

impl NodeSpec {
    pub fn new(name: impl Into<String>) -> Self {
        NodeSpec {
            name: name.into(),
            max_cpu: 1.0,
            hint: None,
            source_weight: 1.0,
        }
    }

    pub fn with_max_cpu(mut self, max_cpu: f64) -> Self {
        self.max_cpu = max_cpu;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub src: String,
    pub dst: String,
    pub grouping: Grouping,
    /// Bytes per tuple on the wire; 0 disables the link constraint for this edge.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub bytes_per_tuple: f64,
    /// Fraction of the producer's output carried by this edge.
    #[serde(default = "default_weight", skip_serializing_if = "is_one")]
    pub weight: f64,
}

impl EdgeSpec {
    pub fn new(src: impl Into<String>, dst: impl Into<String>, grouping: Grouping) -> Self {
        EdgeSpec {
            src: src.into(),
            dst: dst.into(),
            grouping,
            bytes_per_tuple: 0.0,
            weight: 1.0,
        }
    }

    pub fn key(&self) -> String {
        edge_key(&self.src, &self.dst)
    }
}

pub fn edge_key(src: &str, dst: &str) -> String {
    format!("{src}->{dst}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogicalDag {
    pub nodes: Vec<NodeSpec>,
    pub edges: Vec<EdgeSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Empty,
    DuplicateNode { node: String },
    InvalidMaxCpu { node: String },
    InvalidSourceWeight { node: String },
    DanglingEdge { src: String, dst: String },
    SelfLoop { node: String },
    DuplicateEdge { src: String, dst: String },
    InvalidEdgeWeight { src: String, dst: String },
    InvalidBytesPerTuple { src: String, dst: String },
    Cycle { nodes: Vec<String> },
    NoSource,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "DAG has no nodes"),
            Violation::DuplicateNode { node } => write!(f, "node `{node}` declared twice"),
            Violation::InvalidMaxCpu { node } => write!(f, "node `{node}` has max_cpu <= 0"),
            Violation::InvalidSourceWeight { node } => {
                write!(f, "node `{node}` has a non-positive source weight")
            }
            Violation::DanglingEdge { src, dst } => {
                write!(f, "edge {src}->{dst} references an undeclared node")
            }
            Violation::SelfLoop { node } => write!(f, "self-loop on `{node}`"),
            Violation::DuplicateEdge { src, dst } => write!(f, "edge {src}->{dst} declared twice"),
            Violation::InvalidEdgeWeight { src, dst } => {
                write!(f, "edge {src}->{dst} weight outside [0, 1]")
            }
            Violation::InvalidBytesPerTuple { src, dst } => {
                write!(f, "edge {src}->{dst} has negative bytes_per_tuple")
            }
            Violation::Cycle { nodes } => write!(f, "cycle through {}", nodes.join(", ")),
            Violation::NoSource => write!(f, "no source node (every node has an input)"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            let msgs: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
            Err(Error::InvalidDag(msgs.join("; ")))
        }
    }
}

/// Checks the structural invariants of a DAG and reports every violation found.
pub fn validate_dag(dag: &LogicalDag) -> ValidationReport {
    let mut violations = Vec::new();
    if dag.nodes.is_empty() {
        violations.push(Violation::Empty);
    }
    let mut names = BTreeSet::new();
    for n in &dag.nodes {
        if !names.insert(n.name.as_str()) {
            violations.push(Violation::DuplicateNode {
                node: n.name.clone(),
            });
        }
        if !(n.max_cpu > 0.0) {
            violations.push(Violation::InvalidMaxCpu {
                node: n.name.clone(),
            });
        }
        if !(n.source_weight > 0.0) {
            violations.push(Violation::InvalidSourceWeight {
                node: n.name.clone(),
            });
        }
    }
    let mut pairs = BTreeSet::new();
    let mut structurally_sound = true;
    for e in &dag.edges {
        if !names.contains(e.src.as_str()) || !names.contains(e.dst.as_str()) {
            violations.push(Violation::DanglingEdge {
                src: e.src.clone(),
                dst: e.dst.clone(),
            });
            structurally_sound = false;
            continue;
        }
        if e.src == e.dst {
            violations.push(Violation::SelfLoop {
                node: e.src.clone(),
            });
        }
        if !pairs.insert((e.src.as_str(), e.dst.as_str())) {
            violations.push(Violation::DuplicateEdge {
                src: e.src.clone(),
                dst: e.dst.clone(),
            });
        }
        if !(0.0..=1.0).contains(&e.weight) {
            violations.push(Violation::InvalidEdgeWeight {
                src: e.src.clone(),
                dst: e.dst.clone(),
            });
        }
        if !(e.bytes_per_tuple >= 0.0) {
            violations.push(Violation::InvalidBytesPerTuple {
                src: e.src.clone(),
                dst: e.dst.clone(),
            });
        }
    }
    if structurally_sound && !dag.nodes.is_empty() {
        let (order, leftover) = kahn(dag);
        if !leftover.is_empty() {
            violations.push(Violation::Cycle { nodes: leftover });
        }
        let _ = order;
        let has_source = dag
            .nodes
            .iter()
            .any(|n| !dag.edges.iter().any(|e| e.dst == n.name));
        if !has_source {
            violations.push(Violation::NoSource);
        }
    }
    ValidationReport { violations }
}

/// Kahn's algorithm; ties broken by declaration order so the result is deterministic.
fn kahn(dag: &LogicalDag) -> (Vec<usize>, Vec<String>) {
    let index: HashMap<&str, usize> = dag
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.name.as_str(), i))
        .collect();
    let mut indeg = vec![0usize; dag.nodes.len()];
    let mut succ = vec![Vec::new(); dag.nodes.len()];
    for e in &dag.edges {
        if let (Some(&s), Some(&d)) = (index.get(e.src.as_str()), index.get(e.dst.as_str())) {
            indeg[d] += 1;
            succ[s].push(d);
        }
    }
    let mut ready: VecDeque<usize> = (0..dag.nodes.len()).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(dag.nodes.len());
    while let Some(i) = ready.pop_front() {
        order.push(i);
        for &d in &succ[i] {
            indeg[d] -= 1;
            if indeg[d] == 0 {
                ready.push_back(d);
            }
        }
    }
    let leftover = (0..dag.nodes.len())
        .filter(|&i| indeg[i] > 0)
        .map(|i| dag.nodes[i].name.clone())
        .collect();
    (order, leftover)
}

impl LogicalDag {
    pub fn new(nodes: Vec<NodeSpec>, edges: Vec<EdgeSpec>) -> Result<Self> {
        let dag = LogicalDag { nodes, edges };
        validate_dag(&dag).into_result()?;
        Ok(dag)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dag: LogicalDag = serde_json::from_str(text)?;
        validate_dag(&dag).into_result()?;
        Ok(dag)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn node(&self, name: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn in_edges<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a EdgeSpec> + 'a {
        self.edges.iter().filter(move |e| e.dst == node)
    }

    pub fn out_edges<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a EdgeSpec> + 'a {
        self.edges.iter().filter(move |e| e.src == node)
    }

    pub fn is_source(&self, node: &str) -> bool {
        !self.edges.iter().any(|e| e.dst == node)
    }

    pub fn is_sink(&self, node: &str) -> bool {
        !self.edges.iter().any(|e| e.src == node)
    }

    pub fn sources(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.iter().filter(|n| self.is_source(&n.name))
    }

    /// Node indices in topological order (declaration order among ready nodes).
    pub fn topological_order(&self) -> Vec<usize> {
        kahn(self).0
    }

    /// Fraction of the aggregate source rate entering `node` when it is a source.
    pub fn source_share(&self, node: &str) -> f64 {
        if !self.is_source(node) {
            return 0.0;
        }
        let total: f64 = self.sources().map(|n| n.source_weight).sum();
        self.node(node).map_or(0.0, |n| n.source_weight / total)
    }
}

/// Tuple rate on every logical edge, keyed by `"src->dst"`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeRateVector(pub BTreeMap<String, f64>);

impl EdgeRateVector {
    pub fn get(&self, src: &str, dst: &str) -> Option<f64> {
        self.0.get(&edge_key(src, dst)).copied()
    }

    pub fn scaled(&self, k: f64) -> Self {
        EdgeRateVector(self.0.iter().map(|(e, r)| (e.clone(), r * k)).collect())
    }
}

/// Logical (configuration independent) rates: input of every node and rate on every edge.
#[derive(Debug, Clone, PartialEq)]
pub struct LogicalRates {
    pub node_input: BTreeMap<String, f64>,
    pub edges: EdgeRateVector,
}

/// Propagates an aggregate source rate through the DAG using per-node output ratios.
///
/// Every out-edge carries the producer's full `gamma`-scaled output times the edge weight;
/// fan-in sums the incoming edge rates.
pub fn propagate_with<F>(dag: &LogicalDag, gamma: F, source_rate: f64) -> Result<LogicalRates>
where
    F: Fn(&str) -> Option<f64>,
{
    if !(source_rate >= 0.0) || !source_rate.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "source rate must be finite and >= 0, got {source_rate}"
        )));
    }
    let n = dag.nodes.len();
    let index: HashMap<&str, usize> = dag
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.name.as_str(), i))
        .collect();
    let mut incoming_edges = vec![Vec::new(); n];
    let mut outgoing_edges = vec![Vec::new(); n];
    for (k, e) in dag.edges.iter().enumerate() {
        if let (Some(&s), Some(&d)) = (index.get(e.src.as_str()), index.get(e.dst.as_str())) {
            outgoing_edges[s].push(k);
            incoming_edges[d].push(k);
        }
    }
    let source_total: f64 = (0..n)
        .filter(|&i| incoming_edges[i].is_empty())
        .map(|i| dag.nodes[i].source_weight)
        .sum();
    let mut input: BTreeMap<String, f64> = BTreeMap::new();
    let mut edge_rate = vec![0.0; dag.edges.len()];
    for i in dag.topological_order() {
        let node = &dag.nodes[i];
        let g = gamma(&node.name).ok_or_else(|| Error::MissingModel(node.name.clone()))?;
        let incoming = if incoming_edges[i].is_empty() {
            source_rate * node.source_weight / source_total
        } else {
            incoming_edges[i].iter().map(|&k| edge_rate[k]).sum()
        };
        input.insert(node.name.clone(), incoming);
        for &k in &outgoing_edges[i] {
            edge_rate[k] = incoming * g * dag.edges[k].weight;
        }
    }
    let edges = dag
        .edges
        .iter()
        .zip(edge_rate)
        .map(|(e, r)| (e.key(), r))
        .collect();
    Ok(LogicalRates {
        node_input: input,
        edges: EdgeRateVector(edges),
    })
}

/// Edge rates for an aggregate source rate, using the output ratios of trained models.
pub fn propagate_rates(
    dag: &LogicalDag,
    models: &ModelSet,
    source_rate: f64,
) -> Result<EdgeRateVector> {
    Ok(propagate_with(dag, |n| models.get(n).map(|m| m.gamma), source_rate)?.edges)
}

/// Size of the configuration space: sum over machine counts of
/// `(max_instances_per_machine * M) ^ num_nodes`.
pub fn config_space_size(
    num_nodes: u32,
    machines: u64,
    max_instances_per_machine: u64,
) -> Result<u128> {
    if num_nodes == 0 || machines == 0 || max_instances_per_machine == 0 {
        return Err(Error::InvalidArgument(
            "all config-space arguments must be >= 1".into(),
        ));
    }
    let overflow = || {
        Error::Overflow(format!(
            "config space for ({num_nodes}, {machines}, {max_instances_per_machine}) exceeds u128"
        ))
    };
    let mut total: u128 = 0;
    for m in 1..=machines {
        let per = (max_instances_per_machine as u128)
            .checked_mul(m as u128)
            .ok_or_else(overflow)?;
        let term = per.checked_pow(num_nodes).ok_or_else(overflow)?;
        total = total.checked_add(term).ok_or_else(overflow)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wordcount() -> LogicalDag {
        LogicalDag::new(
            vec![NodeSpec::new("W"), NodeSpec::new("C")],
            vec![EdgeSpec::new("W", "C", Grouping::Fields)],
        )
        .unwrap()
    }

    #[test]
    fn wordcount_is_valid() {
        assert!(validate_dag(&wordcount()).is_ok());
    }

    #[test]
    fn self_loop_is_a_cycle() {
        let dag = LogicalDag {
            nodes: vec![NodeSpec::new("A")],
            edges: vec![EdgeSpec::new("A", "A", Grouping::Shuffle)],
        };
        let report = validate_dag(&dag);
        assert!(report.violations.contains(&Violation::SelfLoop { node: "A".into() }));
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::Cycle { .. })));
        assert!(report.violations.contains(&Violation::NoSource));
    }

    #[test]
    fn ad_analytics_chain_is_valid() {
        let names = [
            "ads",
            "event_deserializer",
            "event_filter",
            "event_projection",
            "redis_join",
            "campaign_processor",
        ];
        let nodes = names.iter().map(|n| NodeSpec::new(*n)).collect();
        let edges = names
            .windows(2)
            .map(|w| EdgeSpec::new(w[0], w[1], Grouping::Shuffle))
            .collect();
        let dag = LogicalDag { nodes, edges };
        assert!(validate_dag(&dag).is_ok());
        let order: Vec<_> = dag
            .topological_order()
            .into_iter()
            .map(|i| dag.nodes[i].name.as_str())
            .collect();
        assert_eq!(order, names);
    }

    #[test]
    fn dangling_and_duplicate_edges_are_reported() {
        let dag = LogicalDag {
            nodes: vec![NodeSpec::new("A"), NodeSpec::new("B")],
            edges: vec![
                EdgeSpec::new("A", "B", Grouping::Fields),
                EdgeSpec::new("A", "B", Grouping::Fields),
                EdgeSpec::new("A", "Z", Grouping::Fields),
            ],
        };
        let v = validate_dag(&dag).violations;
        assert!(v.contains(&Violation::DuplicateEdge {
            src: "A".into(),
            dst: "B".into()
        }));
        assert!(v.contains(&Violation::DanglingEdge {
            src: "A".into(),
            dst: "Z".into()
        }));
    }

    #[test]
    fn two_node_cycle_detected() {
        let dag = LogicalDag {
            nodes: vec![NodeSpec::new("S"), NodeSpec::new("A"), NodeSpec::new("B")],
            edges: vec![
                EdgeSpec::new("S", "A", Grouping::Fields),
                EdgeSpec::new("A", "B", Grouping::Fields),
                EdgeSpec::new("B", "A", Grouping::Fields),
            ],
        };
        let v = validate_dag(&dag).violations;
        assert_eq!(
            v,
            vec![Violation::Cycle {
                nodes: vec!["A".into(), "B".into()]
            }]
        );
    }

    #[test]
    fn json_round_trip_uses_spec_field_names() {
        let text = r#"{"nodes":[{"name":"W","max_cpu":1.0},{"name":"C","hint":2}],
                       "edges":[{"src":"W","dst":"C","grouping":"fields","bytes_per_tuple":64,"weight":1.0}]}"#;
        let dag = LogicalDag::from_json(text).unwrap();
        assert_eq!(dag.nodes[1].hint, Some(2));
        assert_eq!(dag.edges[0].bytes_per_tuple, 64.0);
        let back = LogicalDag::from_json(&serde_json::to_string(&dag).unwrap()).unwrap();
        assert_eq!(back, dag);
    }

    #[test]
    fn propagate_identity_chain() {
        let dag = wordcount();
        let r = propagate_with(&dag, |_| Some(1.0), 100.0).unwrap();
        assert_eq!(r.edges.get("W", "C"), Some(100.0));
    }

    #[test]
    fn propagate_filter_ratio() {
        let dag = LogicalDag::new(
            vec![NodeSpec::new("event_filter"), NodeSpec::new("next")],
            vec![EdgeSpec::new("event_filter", "next", Grouping::Shuffle)],
        )
        .unwrap();
        let r = propagate_with(&dag, |n| Some(if n == "event_filter" { 0.32 } else { 1.0 }), 1000.0)
            .unwrap();
        assert!((r.edges.get("event_filter", "next").unwrap() - 320.0).abs() < 1e-9);
    }

    #[test]
    fn propagate_three_node_chain() {
        let dag = LogicalDag::new(
            vec![NodeSpec::new("A"), NodeSpec::new("B"), NodeSpec::new("C")],
            vec![
                EdgeSpec::new("A", "B", Grouping::Fields),
                EdgeSpec::new("B", "C", Grouping::Fields),
            ],
        )
        .unwrap();
        let g = |n: &str| match n {
            "A" => Some(1.0),
            "B" => Some(0.5),
            _ => Some(0.0),
        };
        let r = propagate_with(&dag, g, 200.0).unwrap();
        assert_eq!(r.edges.get("A", "B"), Some(200.0));
        assert_eq!(r.edges.get("B", "C"), Some(100.0));
    }

    #[test]
    fn fan_out_broadcasts_and_fan_in_sums() {
        let mut dag = LogicalDag::new(
            vec![
                NodeSpec::new("A"),
                NodeSpec::new("B"),
                NodeSpec::new("C"),
                NodeSpec::new("D"),
            ],
            vec![
                EdgeSpec::new("A", "B", Grouping::Shuffle),
                EdgeSpec::new("A", "C", Grouping::Shuffle),
                EdgeSpec::new("B", "D", Grouping::Shuffle),
                EdgeSpec::new("C", "D", Grouping::Shuffle),
            ],
        )
        .unwrap();
        dag.edges[1].weight = 0.5;
        let r = propagate_with(&dag, |_| Some(1.0), 10.0).unwrap();
        assert_eq!(r.edges.get("A", "B"), Some(10.0));
        assert_eq!(r.edges.get("A", "C"), Some(5.0));
        assert_eq!(r.node_input["D"], 15.0);
    }

    #[test]
    fn multi_source_split_by_weight() {
        let mut a = NodeSpec::new("A");
        a.source_weight = 3.0;
        let dag = LogicalDag::new(
            vec![a, NodeSpec::new("B"), NodeSpec::new("J")],
            vec![
                EdgeSpec::new("A", "J", Grouping::Shuffle),
                EdgeSpec::new("B", "J", Grouping::Shuffle),
            ],
        )
        .unwrap();
        let r = propagate_with(&dag, |_| Some(1.0), 100.0).unwrap();
        assert_eq!(r.node_input["A"], 75.0);
        assert_eq!(r.node_input["B"], 25.0);
        assert_eq!(r.node_input["J"], 100.0);
    }

    #[test]
    fn missing_gamma_is_an_error() {
        let dag = wordcount();
        let err = propagate_with(&dag, |n| (n == "W").then_some(1.0), 1.0).unwrap_err();
        assert!(matches!(err, Error::MissingModel(n) if n == "C"));
    }

    #[test]
    fn config_space_examples() {
        assert_eq!(config_space_size(3, 100, 3).unwrap(), 688_567_500);
        assert_eq!(config_space_size(1, 1, 1).unwrap(), 1);
        assert_eq!(config_space_size(2, 2, 2).unwrap(), 20);
    }

    #[test]
    fn config_space_overflow_detected() {
        assert!(matches!(
            config_space_size(64, 1000, 1000),
            Err(Error::Overflow(_))
        ));
        assert!(config_space_size(0, 1, 1).is_err());
    }
}
