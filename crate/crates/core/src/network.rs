//! Physical flow network of a configuration with unfolded stream managers.
//!
//! Every container `i` contributes a left stream-manager vertex `SiL` that ingests all tuples
//! entering the container's router, an internal routing vertex `Ii` and a right vertex `SiR`
//! that delivers tuples to local instances. A single switch vertex `X` joins containers.

use std::collections::{BTreeMap, HashMap};

use crate::config::{Configuration, InstanceId};
use crate::dag::LogicalDag;
use crate::error::{Error, Result};
use crate::model::ModelSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VertexKind {
    /// Index into [`FlowNetwork::instances`].
    Instance(usize),
    SmLeft,
    SmInternal,
    SmRight,
    Switch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vertex {
    pub kind: VertexKind,
    pub container: Option<u32>,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arc {
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone)]
pub struct FlowNetwork {
    pub vertices: Vec<Vertex>,
    pub arcs: Vec<Arc>,
    pub instances: Vec<InstanceId>,
    pub instance_container: Vec<u32>,
    pub containers: u32,
    /// Instance indices per node, in instance order.
    pub node_instances: BTreeMap<String, Vec<usize>>,
    instance_vertex: Vec<usize>,
    sm_left: Vec<usize>,
    sm_internal: Vec<usize>,
    sm_right: Vec<usize>,
    switch: usize,
    arc_index: HashMap<(usize, usize), usize>,
}

/// Builds the network after checking that the configuration is valid and every node is modeled.
pub fn build_network(
    dag: &LogicalDag,
    config: &Configuration,
    models: &ModelSet,
) -> Result<FlowNetwork> {
    for n in &dag.nodes {
        models.require(&n.name)?;
    }
    FlowNetwork::build(dag, config)
}

impl FlowNetwork {
    pub fn build(dag: &LogicalDag, config: &Configuration) -> Result<Self> {
        config.validate(dag)?;
        let placed = config.instances(dag)?;
        let m = config.containers;
        let mut net = FlowNetwork {
            vertices: Vec::new(),
            arcs: Vec::new(),
            instances: Vec::with_capacity(placed.len()),
            instance_container: Vec::with_capacity(placed.len()),
            containers: m,
            node_instances: BTreeMap::new(),
            instance_vertex: Vec::with_capacity(placed.len()),
            sm_left: Vec::new(),
            sm_internal: Vec::new(),
            sm_right: Vec::new(),
            switch: 0,
            arc_index: HashMap::new(),
        };
        for c in 0..m {
            let l = net.vertex(VertexKind::SmLeft, Some(c), format!("S{c}L"));
            let i = net.vertex(VertexKind::SmInternal, Some(c), format!("I{c}"));
            let r = net.vertex(VertexKind::SmRight, Some(c), format!("S{c}R"));
            net.sm_left.push(l);
            net.sm_internal.push(i);
            net.sm_right.push(r);
            net.arc(l, i);
            net.arc(i, r);
        }
        net.switch = net.vertex(VertexKind::Switch, None, "X".into());
        if m > 1 {
            for c in 0..m as usize {
                net.arc(net.sm_left[c], net.switch);
                net.arc(net.switch, net.sm_left[c]);
            }
        }
        for (idx, (id, c)) in placed.into_iter().enumerate() {
            if c >= m {
                return Err(Error::InvalidConfig(format!(
                    "instance {id} packed to nonexistent container {c}"
                )));
            }
            let v = net.vertex(VertexKind::Instance(idx), Some(c), id.to_string());
            net.arc(v, net.sm_left[c as usize]);
            net.arc(net.sm_right[c as usize], v);
            net.node_instances
                .entry(id.node.clone())
                .or_default()
                .push(idx);
            net.instances.push(id);
            net.instance_container.push(c);
            net.instance_vertex.push(v);
        }
        Ok(net)
    }

    fn vertex(&mut self, kind: VertexKind, container: Option<u32>, label: String) -> usize {
        self.vertices.push(Vertex {
            kind,
            container,
            label,
        });
        self.vertices.len() - 1
    }

    fn arc(&mut self, from: usize, to: usize) -> usize {
        self.arcs.push(Arc { from, to });
        let k = self.arcs.len() - 1;
        self.arc_index.insert((from, to), k);
        k
    }

    pub fn arc_between(&self, from: usize, to: usize) -> Option<usize> {
        self.arc_index.get(&(from, to)).copied()
    }

    pub fn instance_vertex(&self, instance: usize) -> usize {
        self.instance_vertex[instance]
    }

    pub fn sm_left(&self, container: u32) -> usize {
        self.sm_left[container as usize]
    }

    pub fn sm_internal(&self, container: u32) -> usize {
        self.sm_internal[container as usize]
    }

    pub fn sm_right(&self, container: u32) -> usize {
        self.sm_right[container as usize]
    }

    pub fn switch(&self) -> usize {
        self.switch
    }

    pub fn instances_of(&self, node: &str) -> &[usize] {
        self.node_instances.get(node).map_or(&[], Vec::as_slice)
    }

    /// Number of instances of `node` packed into each container.
    pub fn node_counts(&self, node: &str) -> Vec<u32> {
        let mut counts = vec![0u32; self.containers as usize];
        for &i in self.instances_of(node) {
            counts[self.instance_container[i] as usize] += 1;
        }
        counts
    }

    pub fn is_remote(&self, producer: usize, consumer: usize) -> bool {
        self.instance_container[producer] != self.instance_container[consumer]
    }

    /// Arcs traversed by a tuple from instance `producer` to instance `consumer`.
    pub fn pair_path(&self, producer: usize, consumer: usize) -> Vec<usize> {
        let i = self.instance_container[producer];
        let j = self.instance_container[consumer];
        let mut hops = vec![self.instance_vertex(producer), self.sm_left(i)];
        if i != j {
            hops.push(self.switch);
            hops.push(self.sm_left(j));
        }
        hops.push(self.sm_internal(j));
        hops.push(self.sm_right(j));
        hops.push(self.instance_vertex(consumer));
        hops.windows(2)
            .map(|w| {
                self.arc_between(w[0], w[1])
                    .expect("pair path follows existing arcs")
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ContainerDims;
    use crate::dag::{EdgeSpec, Grouping, NodeSpec};

    fn wordcount() -> LogicalDag {
        LogicalDag::new(
            vec![NodeSpec::new("W"), NodeSpec::new("C")],
            vec![EdgeSpec::new("W", "C", Grouping::Fields)],
        )
        .unwrap()
    }

    fn dims() -> ContainerDims {
        ContainerDims::new(3.0, 4e9)
    }

    #[test]
    fn two_symmetric_containers() {
        let cfg = Configuration::from_layout(dims(), &[vec!["W", "C"], vec!["W", "C"]]);
        let net = FlowNetwork::build(&wordcount(), &cfg).unwrap();
        let count = |k: fn(&VertexKind) -> bool| net.vertices.iter().filter(|v| k(&v.kind)).count();
        assert_eq!(count(|k| matches!(k, VertexKind::SmLeft)), 2);
        assert_eq!(count(|k| matches!(k, VertexKind::SmInternal)), 2);
        assert_eq!(count(|k| matches!(k, VertexKind::SmRight)), 2);
        assert_eq!(count(|k| matches!(k, VertexKind::Switch)), 1);
        assert_eq!(count(|k| matches!(k, VertexKind::Instance(_))), 4);
        // No direct SiL -> SiR shortcut.
        assert!(net.arc_between(net.sm_left(0), net.sm_right(0)).is_none());
    }

    #[test]
    fn single_container_has_no_switch_arcs() {
        let cfg = Configuration::from_layout(dims(), &[vec!["W", "C"]]);
        let net = FlowNetwork::build(&wordcount(), &cfg).unwrap();
        assert!(net
            .arcs
            .iter()
            .all(|a| a.from != net.switch() && a.to != net.switch()));
    }

    #[test]
    fn remote_paths_cross_switch() {
        let cfg = Configuration::from_layout(
            dims(),
            &[vec!["W"], vec!["W"], vec!["C", "C"]],
        );
        let net = FlowNetwork::build(&wordcount(), &cfg).unwrap();
        for &w in net.instances_of("W") {
            for &c in net.instances_of("C") {
                let path = net.pair_path(w, c);
                assert_eq!(path.len(), 6);
                assert!(path.iter().any(|&a| net.arcs[a].to == net.switch()));
            }
        }
    }

    #[test]
    fn local_path_goes_through_internal_vertex() {
        let cfg = Configuration::from_layout(dims(), &[vec!["W", "C"]]);
        let net = FlowNetwork::build(&wordcount(), &cfg).unwrap();
        let path = net.pair_path(0, 1);
        let hops: Vec<_> = path.iter().map(|&a| &net.vertices[net.arcs[a].to].label).collect();
        assert_eq!(hops, ["S0L", "I0", "S0R", "C-0"]);
    }

    #[test]
    fn bad_packing_rejected() {
        let mut cfg = Configuration::from_layout(dims(), &[vec!["W", "C"]]);
        cfg.packing.insert("C-0".into(), 3);
        assert!(FlowNetwork::build(&wordcount(), &cfg).is_err());
    }
}
